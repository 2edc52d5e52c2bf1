//! Semi-supervised adversarial training.
//!
//! Every step runs the whole source graph and the whole target graph through
//! the extractor. Cross-entropy is averaged separately over the source
//! vertices and over the labeled target core and the two means are summed.
//! The unlabeled target vertices reach the classifier through a gradient
//! reversal node and contribute `-λ · entropy` to the total loss, so the
//! prototypes ascend the entropy while the extractor descends it.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape, LOG_EPS};
use crate::error::{GdaipError, Result};
use crate::gat::{argmax_rows, predict_parcellation, BrainGraph, ModelDims, ModelNodes, ModelParams};
use crate::mesh_graph::{CoreRegionSet, Parcellation};
use crate::metrics::dice;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_mme: f64,
    pub tau: f64,
    pub core_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            lr0: 0.01,
            lr_halving_period: 1000,
            momentum: 0.9,
            weight_decay: 0.0005,
            lambda_mme: 0.1,
            tau: 0.05,
            core_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GdaipError::Config(what.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lambda_mme >= 0.0) {
            return bad("lambda_mme must be non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.core_fraction > 0.0 && self.core_fraction <= 1.0) {
            return bad("core_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    /// `lr0 · 0.5^⌊step / period⌋`
    pub fn learning_rate(&self, step: usize) -> f64 {
        let halvings = (step / self.lr_halving_period).min(1074) as i32;
        self.lr0 * 0.5f64.powi(halvings)
    }
}

/// Source graph with full labels; target graph split into a labeled core
/// and the unlabeled remainder.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub source: BrainGraph,
    pub source_labels: Parcellation,
    pub target: BrainGraph,
    /// `(vertex, label)` pairs, ascending by vertex.
    pub target_labeled: Vec<(usize, usize)>,
    /// Ascending.
    pub target_unlabeled: Vec<usize>,
}

impl DomainBatch {
    pub fn new(
        source: BrainGraph,
        source_labels: Parcellation,
        target: BrainGraph,
        core: &CoreRegionSet,
    ) -> Result<Self> {
        let labeled = core.labeled().to_vec();
        let unlabeled = core.unlabeled();
        Self::with_target_sets(source, source_labels, target, labeled, unlabeled)
    }

    /// Ablation batch: no target labels, every target vertex unlabeled.
    pub fn source_only(source: BrainGraph, source_labels: Parcellation, target: BrainGraph) -> Result<Self> {
        let all = (0..target.vertex_count()).collect();
        Self::with_target_sets(source, source_labels, target, Vec::new(), all)
    }

    pub fn with_target_sets(
        source: BrainGraph,
        source_labels: Parcellation,
        target: BrainGraph,
        mut target_labeled: Vec<(usize, usize)>,
        mut target_unlabeled: Vec<usize>,
    ) -> Result<Self> {
        if source_labels.len() != source.vertex_count() {
            return Err(GdaipError::Shape(format!(
                "{} source labels for {} source vertices",
                source_labels.len(),
                source.vertex_count()
            )));
        }
        if source.features().dim() != target.features().dim() {
            return Err(GdaipError::Config(format!(
                "source features have width {}, target {}",
                source.features().dim(),
                target.features().dim()
            )));
        }
        target_labeled.sort_unstable();
        target_unlabeled.sort_unstable();
        let n = target.vertex_count();
        let mut seen = vec![0u8; n];
        for &(v, l) in &target_labeled {
            if v >= n || l >= source_labels.n_roi() {
                return Err(GdaipError::Input(format!("target label ({v}, {l}) out of range")));
            }
            seen[v] += 1;
        }
        for &v in &target_unlabeled {
            if v >= n {
                return Err(GdaipError::Input(format!("unlabeled vertex {v} out of range")));
            }
            seen[v] += 1;
        }
        if let Some(v) = seen.iter().position(|&c| c != 1) {
            return Err(GdaipError::Input(format!(
                "target vertex {v} must be exactly one of labeled/unlabeled"
            )));
        }
        Ok(DomainBatch {
            source,
            source_labels,
            target,
            target_labeled,
            target_unlabeled,
        })
    }

    pub fn n_roi(&self) -> usize {
        self.source_labels.n_roi()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub cls_loss: f64,
    /// Mean entropy over unlabeled target vertices; NaN when the target
    /// graph is not part of the run.
    pub ent_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

/// Sum of the mean negative log-likelihood over source vertices and over
/// labeled target vertices.
pub fn cls_loss(
    pred_source: &Matrix,
    y_source: &[usize],
    pred_target_labeled: &Matrix,
    y_target_labeled: &[usize],
) -> Result<f64> {
    fn mean_nll(p: &Matrix, y: &[usize]) -> Result<f64> {
        if p.nrows() != y.len() {
            return Err(GdaipError::Shape(format!("{} rows for {} labels", p.nrows(), y.len())));
        }
        if y.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (i, &c) in y.iter().enumerate() {
            if c >= p.ncols() {
                return Err(GdaipError::Input(format!("label {c} outside 0..{}", p.ncols())));
            }
            total -= p[[i, c]].max(LOG_EPS).ln();
        }
        Ok(total / y.len() as f64)
    }
    Ok(mean_nll(pred_source, y_source)? + mean_nll(pred_target_labeled, y_target_labeled)?)
}

/// Mean Shannon entropy of the rows, with `0 · ln 0 = 0`.
pub fn ent_loss(pred: &Matrix) -> f64 {
    if pred.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 })
        .sum();
    total / pred.nrows() as f64
}

/// `v ← momentum·v + (grad + weight_decay·θ)`, then `θ ← θ − lr·v`.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    Zip::from(param)
        .and(grad)
        .and(velocity)
        .for_each(|theta, &g, v| {
            *v = momentum * *v + (g + weight_decay * *theta);
            *theta -= lr * *v;
        });
}

/// Optional extras for [`train_with`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Ground truth for the target graph, scored every `validate_every` steps.
    pub validation: Option<Parcellation>,
    pub validate_every: usize,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<ModelParams>,
}

struct TrainGraph {
    tape: Tape,
    nodes: ModelNodes,
    total: NodeId,
    cls: NodeId,
    entropy: Option<NodeId>,
    target_probs: Option<NodeId>,
}

fn build_graph(batch: &DomainBatch, config: &TrainConfig, dims: ModelDims) -> Result<TrainGraph> {
    let d = dims.in_dim;
    let mut tape = Tape::new();
    let nodes = ModelNodes::new(&mut tape, dims);

    let xs = tape.input(batch.source.vertex_count(), d);
    tape.bind(xs, batch.source.features().values().clone())?;
    let fs = nodes.extractor(&mut tape, xs, batch.source.neighborhoods())?;
    let ps = nodes.classifier(&mut tape, fs)?;
    let source_targets: Vec<(usize, usize)> = batch.source_labels.labels().iter().copied().enumerate().collect();
    let mut cls = tape.cross_entropy_mean(ps, source_targets)?;

    let use_entropy = config.lambda_mme > 0.0 && !batch.target_unlabeled.is_empty();
    let mut total = cls;
    let mut entropy = None;
    let mut target_probs = None;
    if !batch.target_labeled.is_empty() || use_entropy {
        let xt = tape.input(batch.target.vertex_count(), d);
        tape.bind(xt, batch.target.features().values().clone())?;
        let ft = nodes.extractor(&mut tape, xt, batch.target.neighborhoods())?;
        if !batch.target_labeled.is_empty() {
            let pt = nodes.classifier(&mut tape, ft)?;
            let ltl = tape.cross_entropy_mean(pt, batch.target_labeled.clone())?;
            cls = tape.scalar_add(cls, ltl)?;
            total = cls;
            target_probs = Some(pt);
        }
        if use_entropy {
            let reversed = tape.gradient_reverse(ft, 1.0)?;
            let pu = nodes.classifier(&mut tape, reversed)?;
            let ent = tape.entropy_mean(pu, batch.target_unlabeled.clone())?;
            let routed = tape.scalar_scale(ent, -config.lambda_mme)?;
            total = tape.scalar_add(cls, routed)?;
            entropy = Some(ent);
            target_probs.get_or_insert(pu);
        }
    }
    Ok(TrainGraph {
        tape,
        nodes,
        total,
        cls,
        entropy,
        target_probs,
    })
}

pub fn train(batch: &DomainBatch, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_with(batch, config, &TrainOptions::default())
}

pub fn train_with(
    batch: &DomainBatch,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let mut dims = ModelDims::new(batch.source.features().dim(), batch.n_roi());
    dims.tau = config.tau;
    let init = match &options.init {
        Some(p) => {
            // custom head counts and widths are allowed; the data-facing sizes are not
            if (p.dims.in_dim, p.dims.n_roi, p.dims.tau) != (dims.in_dim, dims.n_roi, dims.tau) {
                return Err(GdaipError::Config(format!(
                    "initial parameters {:?} do not match {dims:?}",
                    p.dims
                )));
            }
            dims = p.dims;
            p.clone()
        }
        None => ModelParams::init(dims, config.seed)?,
    };
    if config.steps == 0 {
        return Ok((init, TrainHistory::default()));
    }

    let mut g = build_graph(batch, config, dims)?;
    g.nodes.bind(&mut g.tape, &init)?;
    let params = g.nodes.blocks();
    let mut velocity: Vec<Matrix> = params.iter().map(|&id| Matrix::zeros(g.tape.shape(id))).collect();
    let mut history = TrainHistory {
        records: Vec::with_capacity(config.steps),
    };

    for step in 0..config.steps {
        let lr = config.learning_rate(step);
        g.tape.forward()?;
        let cls = g.tape.scalar(g.cls).expect("scalar loss");
        if !cls.is_finite() {
            return Err(GdaipError::Divergence {
                step,
                detail: format!("classification loss became {cls}"),
            });
        }
        let ent = match (g.entropy, g.target_probs) {
            (Some(e), _) => g.tape.scalar(e).expect("scalar loss"),
            (None, Some(pt)) => {
                let p = g.tape.value(pt).expect("evaluated");
                let rows = p.select(ndarray::Axis(0), &batch.target_unlabeled);
                ent_loss(&rows)
            }
            (None, None) => f64::NAN,
        };
        let val_dice = match &options.validation {
            Some(truth) if options.validate_every > 0 && step % options.validate_every == 0 => {
                let predicted = match g.target_probs {
                    Some(pt) => Parcellation::new(
                        argmax_rows(g.tape.value(pt).expect("evaluated")),
                        batch.n_roi(),
                    )?,
                    None => predict_parcellation(&batch.target, &g.nodes.read(&g.tape)?)?,
                };
                Some(dice(&predicted, truth)?.mean)
            }
            _ => None,
        };
        history.records.push(StepRecord {
            step,
            lr,
            cls_loss: cls,
            ent_loss: ent,
            val_dice,
        });
        if step % 500 == 0 {
            log::info!("step {step}: lr {lr} cls {cls:.5} ent {ent:.5}");
        }

        g.tape.backward(g.total)?;
        for (k, &id) in params.iter().enumerate() {
            let grad = g.tape.grad_or_zeros(id);
            let theta = g.tape.leaf_mut(id).expect("parameter bound");
            sgd_step(theta, &grad, &mut velocity[k], lr, config.momentum, config.weight_decay);
        }
    }
    let trained = g.nodes.read(&g.tape)?;
    Ok((trained, history))
}

/// Analytic gradients of the routed entropy term alone (classification
/// terms excluded), keyed in checkpoint block order. Used to verify the
/// adversarial sign contract.
pub fn routed_entropy_gradients(
    batch: &DomainBatch,
    params: &ModelParams,
    lambda_mme: f64,
) -> Result<Vec<Matrix>> {
    let dims = params.dims;
    let mut tape = Tape::new();
    let nodes = ModelNodes::new(&mut tape, dims);
    let xt = tape.input(batch.target.vertex_count(), dims.in_dim);
    tape.bind(xt, batch.target.features().values().clone())?;
    let ft = nodes.extractor(&mut tape, xt, batch.target.neighborhoods())?;
    let reversed = tape.gradient_reverse(ft, 1.0)?;
    let pu = nodes.classifier(&mut tape, reversed)?;
    let ent = tape.entropy_mean(pu, batch.target_unlabeled.clone())?;
    let routed = tape.scalar_scale(ent, -lambda_mme)?;
    nodes.bind(&mut tape, params)?;
    tape.forward()?;
    tape.backward(routed)?;
    Ok(nodes.blocks().into_iter().map(|id| tape.grad_or_zeros(id)).collect())
}

/// Loss values at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub cls: f64,
    /// NaN when the batch has no entropy term.
    pub entropy: f64,
    /// `cls − λ·entropy`, the value the reversed gradients belong to.
    pub total: f64,
}

/// One forward and backward pass of the training objective. Gradients are
/// in checkpoint block order and include the reversal: they equal
/// `∇cls − λ∇ent` for the prototypes and `∇cls + λ∇ent` for the extractor.
pub fn objective_gradients(
    batch: &DomainBatch,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<(Objective, Vec<Matrix>)> {
    let mut g = build_graph(batch, config, params.dims)?;
    g.nodes.bind(&mut g.tape, params)?;
    g.tape.forward()?;
    g.tape.backward(g.total)?;
    let objective = Objective {
        cls: g.tape.scalar(g.cls).expect("scalar loss"),
        entropy: g.entropy.map_or(f64::NAN, |e| g.tape.scalar(e).expect("scalar loss")),
        total: g.tape.scalar(g.total).expect("scalar loss"),
    };
    let grads = g.nodes.blocks().into_iter().map(|id| g.tape.grad_or_zeros(id)).collect();
    Ok((objective, grads))
}

/// Plain mean entropy over the unlabeled target vertices, no reversal.
pub fn target_entropy(batch: &DomainBatch, params: &ModelParams) -> Result<f64> {
    let probs = crate::gat::predict_proba(&batch.target, params)?;
    Ok(ent_loss(&probs.select(ndarray::Axis(0), &batch.target_unlabeled)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lr_schedule_spot_values() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0), 0.01);
        assert_eq!(c.learning_rate(999), 0.01);
        assert_eq!(c.learning_rate(1000), 0.005);
        assert_eq!(c.learning_rate(3999), 0.00125);
    }

    #[test]
    fn loss_values() {
        let onehot = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(cls_loss(&onehot, &[0, 2], &onehot, &[0, 2]).unwrap() < 1e-9);
        assert_eq!(ent_loss(&onehot), 0.0);
        let uniform = Matrix::from_elem((3, 4), 0.25);
        let l = cls_loss(&uniform, &[0, 1, 2], &uniform, &[3, 3, 0]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((ent_loss(&uniform) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let p = array![[0.0, 1.0]];
        let l = cls_loss(&p, &[0], &Matrix::zeros((0, 2)), &[]).unwrap();
        assert!((l + LOG_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn sgd_cases() {
        let mut theta = array![[1.0, -2.0]];
        let mut v = Matrix::zeros((1, 2));
        sgd_step(&mut theta, &Matrix::zeros((1, 2)), &mut v, 0.1, 0.9, 0.0);
        assert_eq!(theta, array![[1.0, -2.0]]);
        sgd_step(&mut theta, &array![[0.5, 1.0]], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(theta, array![[1.0 - 0.05, -2.0 - 0.1]]);
    }

    #[test]
    fn sgd_scalar_recurrence() {
        // hand-unrolled: g = 2θ (quadratic), lr 0.1, m 0.9, wd 0.01
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let mut theta = array![[1.0]];
        let mut v = array![[0.0]];
        let (mut t, mut vv) = (1.0f64, 0.0f64);
        for _ in 0..3 {
            let g = array![[2.0 * theta[[0, 0]]]];
            sgd_step(&mut theta, &g, &mut v, lr, m, wd);
            vv = m * vv + (2.0 * t + wd * t);
            t -= lr * vv;
        }
        // θ1 = 1 - 0.1·2.01 = 0.799; v1 = 2.01
        // v2 = 0.9·2.01 + 2.01·0.799 = 3.41499; θ2 = 0.799 - 0.341499 = 0.457501
        // v3 = 0.9·3.41499 + 2.01·0.457501 = 3.99306801; θ3 = 0.058194199
        assert!((t - 0.058194199).abs() < 1e-12);
        assert!((theta[[0, 0]] - t).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut theta = array![[3.0, -1.0, 0.5]];
        let mut v = Matrix::zeros((1, 3));
        let mut prev = theta.iter().map(|x| x * x).sum::<f64>();
        for _ in 0..50 {
            sgd_step(&mut theta, &Matrix::zeros((1, 3)), &mut v, 0.01, 0.9, 0.0005);
            let now = theta.iter().map(|x| x * x).sum::<f64>();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
