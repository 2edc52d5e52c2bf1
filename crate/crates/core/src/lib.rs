//! Individual cortical parcellation on surface graphs.
//!
//! The pipeline builds a graph from a triangular surface mesh, attaches
//! PCA-reduced functional-connectivity fingerprints to each vertex, and
//! trains a three-layer graph attention network with a cosine-prototype
//! classifier. A group-level (source) graph is labeled with a reference
//! atlas; an individual (target) graph receives labels only on the core of
//! each region and is adapted with an adversarial entropy term routed
//! through a gradient reversal node.
//!
//! Module map:
//!
//! - [`mesh_graph`]: mesh topology, boundaries, core regions, icospheres
//! - [`connectome`]: Pearson fingerprints, group averaging, joint PCA
//! - [`autodiff`]: the small reverse-mode engine the model is trained with
//! - [`gat`]: attention layers, feature extractor and prototype classifier
//! - [`trainer`]: losses, SGD with momentum and the training loop
//! - [`synth`]: synthetic corpora with planted ground truth
//! - [`metrics`]: Dice, consistency, homogeneity and t-tests
//! - [`formats`] and [`cli_io`]: file formats and command orchestration

pub mod autodiff;
pub mod cli_io;
pub mod connectome;
pub mod error;
pub mod formats;
pub mod gat;
pub mod mesh_graph;
pub mod metrics;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{GdaipError, Result};
