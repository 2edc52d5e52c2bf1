//! Three-layer multi-head graph attention extractor with a bias-free
//! cosine-prototype classifier.

use std::sync::Arc;

use ndarray::Axis;
use rand::Rng;

use crate::autodiff::{Matrix, Neighborhoods, NodeId, Tape};
use crate::connectome::FeatureMatrix;
use crate::error::{GdaipError, Result};
use crate::mesh_graph::{AdjacencyMatrix, Parcellation};
use crate::seed::stream_rng;

pub const LAYERS: usize = 3;
pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = 50;
pub const ATTENTION_SLOPE: f64 = 0.2;
pub const DEFAULT_TAU: f64 = 0.05;

/// Mesh adjacency plus one feature row per vertex.
#[derive(Debug, Clone)]
pub struct BrainGraph {
    adjacency: AdjacencyMatrix,
    hood: Arc<Neighborhoods>,
    features: FeatureMatrix,
}

impl BrainGraph {
    pub fn new(adjacency: AdjacencyMatrix, features: FeatureMatrix) -> Result<Self> {
        if adjacency.vertex_count() != features.vertex_count() {
            return Err(GdaipError::Shape(format!(
                "adjacency has {} vertices, features have {} rows",
                adjacency.vertex_count(),
                features.vertex_count()
            )));
        }
        let hood = Arc::new(Neighborhoods::with_self_loops(&adjacency));
        Ok(BrainGraph {
            adjacency,
            hood,
            features,
        })
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn neighborhoods(&self) -> &Arc<Neighborhoods> {
        &self.hood
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.vertex_count()
    }
}

/// Architecture sizes plus the classifier temperature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub in_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub n_roi: usize,
    pub tau: f64,
}

impl ModelDims {
    pub fn new(in_dim: usize, n_roi: usize) -> Self {
        ModelDims {
            in_dim,
            heads: HEADS,
            head_dim: HEAD_DIM,
            n_roi,
            tau: DEFAULT_TAU,
        }
    }

    /// Width of every layer's concatenated output.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn layer_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_dim
        } else {
            self.width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.n_roi == 0 {
            return Err(GdaipError::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(GdaipError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    /// Per head, in_dim × head_dim.
    pub weights: Vec<Matrix>,
    /// Per head, 1 × 2·head_dim: source half then neighbor half.
    pub attention: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub layers: Vec<GatLayerParams>,
    /// n_roi × width; rows are normalized inside the classifier.
    pub prototypes: Matrix,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-s..s))
}

impl ModelParams {
    /// Glorot-uniform initialization from the `init` stream of `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream_rng(seed, &["init"]);
        let hd = dims.head_dim;
        let layers = (0..LAYERS)
            .map(|l| {
                let in_dim = dims.layer_in_dim(l);
                let weights = (0..dims.heads)
                    .map(|_| glorot(&mut rng, in_dim, hd, in_dim, hd))
                    .collect();
                let attention = (0..dims.heads)
                    .map(|_| glorot(&mut rng, 1, 2 * hd, 2 * hd, 1))
                    .collect();
                GatLayerParams { weights, attention }
            })
            .collect();
        let prototypes = glorot(&mut rng, dims.n_roi, dims.width(), dims.width(), dims.n_roi);
        Ok(ModelParams {
            dims,
            layers,
            prototypes,
        })
    }

    /// All parameter blocks in checkpoint order: per layer the head
    /// weights, then the head attention vectors; prototypes last.
    pub fn blocks(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.attention.iter());
        }
        out.push(&self.prototypes);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.weights.iter_mut());
            out.extend(layer.attention.iter_mut());
        }
        out.push(&mut self.prototypes);
        out
    }

    /// Expected shapes of [`ModelParams::blocks`].
    pub fn block_shapes(dims: &ModelDims) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..LAYERS {
            out.extend(std::iter::repeat_n((dims.layer_in_dim(l), dims.head_dim), dims.heads));
            out.extend(std::iter::repeat_n((1, 2 * dims.head_dim), dims.heads));
        }
        out.push((dims.n_roi, dims.width()));
        out
    }

    pub fn from_blocks(dims: ModelDims, blocks: Vec<Matrix>) -> Result<Self> {
        dims.validate()?;
        let shapes = Self::block_shapes(&dims);
        if blocks.len() != shapes.len() {
            return Err(GdaipError::Config(format!(
                "expected {} parameter blocks, got {}",
                shapes.len(),
                blocks.len()
            )));
        }
        for (k, (b, s)) in blocks.iter().zip(&shapes).enumerate() {
            if b.dim() != *s {
                return Err(GdaipError::Config(format!(
                    "parameter block {k} has shape {:?}, expected {s:?}",
                    b.dim()
                )));
            }
        }
        let mut it = blocks.into_iter();
        let layers = (0..LAYERS)
            .map(|_| GatLayerParams {
                weights: it.by_ref().take(dims.heads).collect(),
                attention: it.by_ref().take(dims.heads).collect(),
            })
            .collect();
        let prototypes = it.next().expect("counted above");
        Ok(ModelParams {
            dims,
            layers,
            prototypes,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// Tape nodes holding one model's parameters.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub dims: ModelDims,
    pub weights: Vec<Vec<NodeId>>,
    pub attention: Vec<Vec<NodeId>>,
    pub prototypes: NodeId,
}

impl ModelNodes {
    pub fn new(tape: &mut Tape, dims: ModelDims) -> Self {
        let hd = dims.head_dim;
        let mut weights = Vec::new();
        let mut attention = Vec::new();
        for l in 0..LAYERS {
            let in_dim = dims.layer_in_dim(l);
            weights.push((0..dims.heads).map(|_| tape.parameter(in_dim, hd)).collect());
            attention.push((0..dims.heads).map(|_| tape.parameter(1, 2 * hd)).collect());
        }
        let prototypes = tape.parameter(dims.n_roi, dims.width());
        ModelNodes {
            dims,
            weights,
            attention,
            prototypes,
        }
    }

    /// Parameter nodes in checkpoint block order.
    pub fn blocks(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in 0..LAYERS {
            out.extend(&self.weights[l]);
            out.extend(&self.attention[l]);
        }
        out.push(self.prototypes);
        out
    }

    pub fn bind(&self, tape: &mut Tape, params: &ModelParams) -> Result<()> {
        if params.dims != self.dims {
            return Err(GdaipError::Config(format!(
                "parameters {:?} do not match model {:?}",
                params.dims, self.dims
            )));
        }
        for (id, block) in self.blocks().into_iter().zip(params.blocks()) {
            tape.bind(id, block.clone())?;
        }
        Ok(())
    }

    /// Copies the tape's current parameter values out.
    pub fn read(&self, tape: &Tape) -> Result<ModelParams> {
        let blocks = self
            .blocks()
            .into_iter()
            .map(|id| {
                tape.value(id)
                    .cloned()
                    .ok_or_else(|| GdaipError::Input("parameter node unbound".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_blocks(self.dims, blocks)
    }

    /// One attention layer: per-head projection and neighbor attention,
    /// heads concatenated. No activation.
    pub fn layer(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: NodeId,
        hood: &Arc<Neighborhoods>,
    ) -> Result<NodeId> {
        let heads = (0..self.dims.heads)
            .map(|h| {
                let z = tape.dense_linear(x, self.weights[layer][h])?;
                tape.neighbor_attention(z, self.attention[layer][h], hood.clone(), ATTENTION_SLOPE)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.head_concat(&heads)
    }

    /// Three layers with an exponential-linear activation between them.
    pub fn extractor(&self, tape: &mut Tape, x: NodeId, hood: &Arc<Neighborhoods>) -> Result<NodeId> {
        if tape.shape(x).1 != self.dims.in_dim {
            return Err(GdaipError::Config(format!(
                "features have width {}, model expects {}",
                tape.shape(x).1,
                self.dims.in_dim
            )));
        }
        let mut h = x;
        for l in 0..LAYERS {
            h = self.layer(tape, l, h, hood)?;
            if l + 1 < LAYERS {
                h = tape.exponential_linear(h)?;
            }
        }
        Ok(h)
    }

    /// Row-normalized features against row-normalized prototypes, softmax at
    /// temperature tau.
    pub fn classifier(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let f = tape.row_l2_normalize(features)?;
        let w = tape.row_l2_normalize(self.prototypes)?;
        let cos = tape.dense_linear_t(f, w)?;
        tape.temperature_softmax(cos, self.dims.tau)
    }
}

/// Output of one attention layer (heads concatenated, no activation).
pub fn gat_layer(
    features: &Matrix,
    adj: &AdjacencyMatrix,
    params: &GatLayerParams,
) -> Result<Matrix> {
    if adj.vertex_count() != features.nrows() {
        return Err(GdaipError::Shape(format!(
            "{} feature rows for a {}-vertex graph",
            features.nrows(),
            adj.vertex_count()
        )));
    }
    if params.weights.is_empty() || params.weights.len() != params.attention.len() {
        return Err(GdaipError::Shape("layer needs matching, non-empty head lists".into()));
    }
    let hood = Arc::new(Neighborhoods::with_self_loops(adj));
    let mut tape = Tape::new();
    let x = tape.input(features.nrows(), features.ncols());
    let mut heads = Vec::new();
    for (w, a) in params.weights.iter().zip(&params.attention) {
        let wn = tape.parameter(w.nrows(), w.ncols());
        let an = tape.parameter(a.nrows(), a.ncols());
        tape.bind(wn, w.clone())?;
        tape.bind(an, a.clone())?;
        let z = tape.dense_linear(x, wn)?;
        heads.push(tape.neighbor_attention(z, an, hood.clone(), ATTENTION_SLOPE)?);
    }
    let out = tape.head_concat(&heads)?;
    tape.bind(x, features.clone())?;
    tape.forward()?;
    Ok(tape.value(out).expect("evaluated").clone())
}

fn feature_tape(graph: &BrainGraph, params: &ModelParams) -> Result<(Tape, ModelNodes, NodeId)> {
    let dims = params.dims;
    if graph.features().dim() != dims.in_dim {
        return Err(GdaipError::Config(format!(
            "graph features have width {}, model expects {}",
            graph.features().dim(),
            dims.in_dim
        )));
    }
    let mut tape = Tape::new();
    let nodes = ModelNodes::new(&mut tape, dims);
    let x = tape.input(graph.vertex_count(), dims.in_dim);
    let f = nodes.extractor(&mut tape, x, graph.neighborhoods())?;
    nodes.bind(&mut tape, params)?;
    tape.bind(x, graph.features().values().clone())?;
    Ok((tape, nodes, f))
}

/// N × width extracted features.
pub fn extract_features(graph: &BrainGraph, params: &ModelParams) -> Result<Matrix> {
    let (mut tape, _, f) = feature_tape(graph, params)?;
    tape.forward()?;
    Ok(tape.value(f).expect("evaluated").clone())
}

/// Class probabilities from features and prototypes.
pub fn classify(features: &Matrix, prototypes: &Matrix, tau: f64) -> Result<Matrix> {
    if features.ncols() != prototypes.ncols() {
        return Err(GdaipError::Shape(format!(
            "features have width {}, prototypes {}",
            features.ncols(),
            prototypes.ncols()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.input(features.nrows(), features.ncols());
    let w = tape.input(prototypes.nrows(), prototypes.ncols());
    let fnorm = tape.row_l2_normalize(f)?;
    let wnorm = tape.row_l2_normalize(w)?;
    let cos = tape.dense_linear_t(fnorm, wnorm)?;
    let p = tape.temperature_softmax(cos, tau)?;
    tape.bind(f, features.clone())?;
    tape.bind(w, prototypes.clone())?;
    tape.forward()?;
    Ok(tape.value(p).expect("evaluated").clone())
}

pub fn predict_proba(graph: &BrainGraph, params: &ModelParams) -> Result<Matrix> {
    let (mut tape, nodes, f) = feature_tape(graph, params)?;
    let p = nodes.classifier(&mut tape, f)?;
    tape.forward()?;
    Ok(tape.value(p).expect("evaluated").clone())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict_parcellation(graph: &BrainGraph, params: &ModelParams) -> Result<Parcellation> {
    let probs = predict_proba(graph, params)?;
    Parcellation::new(argmax_rows(&probs), params.dims.n_roi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn small_dims(in_dim: usize, n_roi: usize) -> ModelDims {
        ModelDims {
            in_dim,
            heads: 2,
            head_dim: 3,
            n_roi,
            tau: DEFAULT_TAU,
        }
    }

    #[test]
    fn isolated_vertex_returns_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![]]).unwrap();
        let f = random(&mut rng, 1, 4);
        let params = GatLayerParams {
            weights: vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3)],
            attention: vec![random(&mut rng, 1, 6), random(&mut rng, 1, 6)],
        };
        let out = gat_layer(&f, &adj, &params).unwrap();
        let expect = ndarray::concatenate(
            Axis(1),
            &[f.dot(&params.weights[0]).view(), f.dot(&params.weights[1]).view()],
        )
        .unwrap();
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_attention_is_neighborhood_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![1, 2], vec![2], vec![3], vec![]]).unwrap();
        let f = random(&mut rng, 4, 5);
        let w = random(&mut rng, 5, 3);
        let params = GatLayerParams {
            weights: vec![w.clone()],
            attention: vec![Matrix::zeros((1, 6))],
        };
        let out = gat_layer(&f, &adj, &params).unwrap();
        let z = f.dot(&w);
        for i in 0..4 {
            let mut hood: Vec<usize> = adj.neighbors(i).to_vec();
            hood.push(i);
            for c in 0..3 {
                let mean: f64 = hood.iter().map(|&j| z[[j, c]]).sum::<f64>() / hood.len() as f64;
                assert!((out[[i, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_parallel_prototype() {
        let features = array![[2.0, 0.0, 0.0, 0.0]];
        let prototypes = array![[0.0, 1.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 3.0]];
        let p = classify(&features, &prototypes, 0.05).unwrap();
        let expect = 20f64.exp() / (20f64.exp() + 2.0);
        assert!((p[[0, 1]] - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_prototypes_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = random(&mut rng, 5, 4);
        let proto = random(&mut rng, 1, 4);
        let prototypes = ndarray::concatenate(Axis(0), &[proto.view(); 3]).unwrap();
        let p = classify(&features, &prototypes, 0.05).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(argmax_rows(&p), vec![0; 5]);
    }

    #[test]
    fn argmax_unique_max() {
        let p = array![[0.1, 0.7, 0.2], [0.5, 0.2, 0.3], [0.2, 0.3, 0.5]];
        assert_eq!(argmax_rows(&p), vec![1, 0, 2]);
    }

    #[test]
    fn single_vertex_pipeline() {
        let dims = small_dims(3, 2);
        let params = ModelParams::init(dims, 5).unwrap();
        let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![]]).unwrap();
        let feats = FeatureMatrix::new(array![[0.3, -0.2, 0.9]]).unwrap();
        let graph = BrainGraph::new(adj, feats.clone()).unwrap();
        let out = extract_features(&graph, &params).unwrap();
        // singleton softmax: each layer is the plain projection
        let mut h = feats.values().clone();
        for (l, layer) in params.layers.iter().enumerate() {
            let parts: Vec<Matrix> = layer.weights.iter().map(|w| h.dot(w)).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            h = ndarray::concatenate(Axis(1), &views).unwrap();
            if l + 1 < LAYERS {
                h.mapv_inplace(|v| if v > 0.0 { v } else { v.exp_m1() });
            }
        }
        for (a, b) in out.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cycle_with_identical_features_gives_identical_rows() {
        let n = 7;
        let adj = AdjacencyMatrix::from_neighbor_lists((0..n).map(|i| vec![(i + 1) % n]).collect()).unwrap();
        let feats = FeatureMatrix::new(Matrix::from_shape_fn((n, 4), |(_, c)| c as f64 - 1.5)).unwrap();
        let graph = BrainGraph::new(adj, feats).unwrap();
        let params = ModelParams::init(small_dims(4, 3), 9).unwrap();
        let out = extract_features(&graph, &params).unwrap();
        for i in 1..n {
            for c in 0..out.ncols() {
                assert!((out[[i, c]] - out[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_width_mismatch_is_config_error() {
        let params = ModelParams::init(small_dims(4, 3), 1).unwrap();
        let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![1], vec![]]).unwrap();
        let graph = BrainGraph::new(adj, FeatureMatrix::new(Matrix::zeros((2, 5))).unwrap()).unwrap();
        assert!(matches!(extract_features(&graph, &params), Err(GdaipError::Config(_))));
    }

    #[test]
    fn full_size_blocks_round_trip() {
        let dims = ModelDims::new(50, 20);
        let params = ModelParams::init(dims, 0).unwrap();
        assert_eq!(params.layers[1].weights[0].dim(), (200, 50));
        assert_eq!(params.prototypes.dim(), (20, 200));
        let blocks: Vec<Matrix> = params.blocks().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_blocks(dims, blocks).unwrap(), params);
        let s = (6.0f64 / 100.0).sqrt();
        assert!(params.layers[0].weights[0].iter().all(|v| v.abs() <= s));
    }
}
