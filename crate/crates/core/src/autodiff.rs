//! A small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! The tape is built once (define-then-run): every node records its op,
//! its static shape and its predecessors, which always have smaller indices,
//! so index order is a topological order. Leaves ([`OpKind::Parameter`] and
//! [`OpKind::Input`]) are bound with values and keep them across passes;
//! [`Tape::forward`] recomputes every other node and [`Tape::backward`]
//! walks the nodes in exact reverse index order.
//!
//! Only the operators the parcellation model needs are provided. The
//! neighbor attention op is fused (logits, masked softmax and aggregation in
//! one node) so its backward pass can be written and checked by hand.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GdaipError, Result};
use crate::mesh_graph::AdjacencyMatrix;

pub type Matrix = Array2<f64>;

/// Clamp applied inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;
/// Added to row norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Parameter,
    Input,
    DenseLinear,
    LeakyRectifier,
    ExponentialLinear,
    NeighborAttention,
    RowL2Normalize,
    TemperatureSoftmax,
    CrossEntropyMean,
    EntropyMean,
    ScalarAdd,
    ScalarScale,
    GradientReverse,
    HeadConcat,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 12] = [
        OpKind::DenseLinear,
        OpKind::LeakyRectifier,
        OpKind::ExponentialLinear,
        OpKind::NeighborAttention,
        OpKind::RowL2Normalize,
        OpKind::TemperatureSoftmax,
        OpKind::CrossEntropyMean,
        OpKind::EntropyMean,
        OpKind::ScalarAdd,
        OpKind::ScalarScale,
        OpKind::GradientReverse,
        OpKind::HeadConcat,
    ];
}

/// Attention neighborhoods in CSR form. Every vertex includes itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighborhoods {
    pub fn with_self_loops(adj: &AdjacencyMatrix) -> Self {
        let n = adj.vertex_count();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n + 2 * adj.edge_count());
        offsets.push(0);
        for i in 0..n {
            let nb = adj.neighbors(i);
            let at = nb.partition_point(|&j| j < i);
            indices.extend_from_slice(&nb[..at]);
            indices.push(i);
            indices.extend_from_slice(&nb[at..]);
            offsets.push(indices.len());
        }
        Neighborhoods { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(&self, vertex: usize) -> &[usize] {
        &self.indices[self.offsets[vertex]..self.offsets[vertex + 1]]
    }

    pub fn edge_slots(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Parameter,
    Input,
    DenseLinear { x: NodeId, w: NodeId, transpose_w: bool },
    LeakyRectifier { x: NodeId, slope: f64 },
    ExponentialLinear { x: NodeId },
    NeighborAttention { z: NodeId, a: NodeId, hood: Arc<Neighborhoods>, slope: f64 },
    RowL2Normalize { x: NodeId },
    TemperatureSoftmax { x: NodeId, tau: f64 },
    CrossEntropyMean { p: NodeId, targets: Arc<[(usize, usize)]> },
    EntropyMean { p: NodeId, rows: Arc<[usize]> },
    ScalarAdd { a: NodeId, b: NodeId },
    ScalarScale { x: NodeId, factor: f64 },
    GradientReverse { x: NodeId, kappa: f64 },
    HeadConcat { parts: Vec<NodeId> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Parameter => OpKind::Parameter,
            Op::Input => OpKind::Input,
            Op::DenseLinear { .. } => OpKind::DenseLinear,
            Op::LeakyRectifier { .. } => OpKind::LeakyRectifier,
            Op::ExponentialLinear { .. } => OpKind::ExponentialLinear,
            Op::NeighborAttention { .. } => OpKind::NeighborAttention,
            Op::RowL2Normalize { .. } => OpKind::RowL2Normalize,
            Op::TemperatureSoftmax { .. } => OpKind::TemperatureSoftmax,
            Op::CrossEntropyMean { .. } => OpKind::CrossEntropyMean,
            Op::EntropyMean { .. } => OpKind::EntropyMean,
            Op::ScalarAdd { .. } => OpKind::ScalarAdd,
            Op::ScalarScale { .. } => OpKind::ScalarScale,
            Op::GradientReverse { .. } => OpKind::GradientReverse,
            Op::HeadConcat { .. } => OpKind::HeadConcat,
        }
    }

    fn predecessors(&self) -> Vec<NodeId> {
        match self {
            Op::Parameter | Op::Input => vec![],
            Op::DenseLinear { x, w, .. } => vec![*x, *w],
            Op::NeighborAttention { z, a, .. } => vec![*z, *a],
            Op::ScalarAdd { a, b } => vec![*a, *b],
            Op::HeadConcat { parts } => parts.clone(),
            Op::LeakyRectifier { x, .. }
            | Op::ExponentialLinear { x }
            | Op::RowL2Normalize { x }
            | Op::TemperatureSoftmax { x, .. }
            | Op::ScalarScale { x, .. }
            | Op::GradientReverse { x, .. } => vec![*x],
            Op::CrossEntropyMean { p, .. } | Op::EntropyMean { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: (usize, usize),
    needs_grad: bool,
}

/// Per-edge quantities cached by the attention op for its backward pass.
#[derive(Debug, Clone, Default)]
struct AttentionCache {
    alpha: Vec<f64>,
    pre: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Option<Matrix>>,
    grads: Vec<Option<Matrix>>,
    attention: Vec<Option<AttentionCache>>,
}

fn shape_err(msg: String) -> GdaipError {
    GdaipError::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    fn check(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape)
            .ok_or_else(|| shape_err(format!("node {} does not exist", id.0)))
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        let needs_grad = match op {
            Op::Parameter => true,
            Op::Input => false,
            _ => op.predecessors().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        self.values.push(None);
        self.grads.push(None);
        self.attention.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn parameter(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Parameter, (rows, cols))
    }

    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input, (rows, cols))
    }

    /// `x · w` with `w` of shape in × out.
    pub fn dense_linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.check(x)?, self.check(w)?);
        if xs.1 != ws.0 {
            return Err(shape_err(format!("dense_linear: x {xs:?} · w {ws:?}")));
        }
        Ok(self.push(Op::DenseLinear { x, w, transpose_w: false }, (xs.0, ws.1)))
    }

    /// `x · wᵀ` with `w` of shape out × in.
    pub fn dense_linear_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.check(x)?, self.check(w)?);
        if xs.1 != ws.1 {
            return Err(shape_err(format!("dense_linear_t: x {xs:?} · wᵀ {ws:?}")));
        }
        Ok(self.push(Op::DenseLinear { x, w, transpose_w: true }, (xs.0, ws.0)))
    }

    pub fn leaky_rectifier(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let xs = self.check(x)?;
        Ok(self.push(Op::LeakyRectifier { x, slope }, xs))
    }

    pub fn exponential_linear(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.check(x)?;
        Ok(self.push(Op::ExponentialLinear { x }, xs))
    }

    /// One attention head: `z` is N × k, `a` is 1 × 2k (source half, then
    /// neighbor half). Output is N × k.
    pub fn neighbor_attention(
        &mut self,
        z: NodeId,
        a: NodeId,
        hood: Arc<Neighborhoods>,
        slope: f64,
    ) -> Result<NodeId> {
        let (zs, as_) = (self.check(z)?, self.check(a)?);
        if as_ != (1, 2 * zs.1) {
            return Err(shape_err(format!(
                "neighbor_attention: attention vector {as_:?} for head width {}",
                zs.1
            )));
        }
        if hood.len() != zs.0 {
            return Err(shape_err(format!(
                "neighbor_attention: {} neighborhoods for {} rows",
                hood.len(),
                zs.0
            )));
        }
        Ok(self.push(Op::NeighborAttention { z, a, hood, slope }, zs))
    }

    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.check(x)?;
        Ok(self.push(Op::RowL2Normalize { x }, xs))
    }

    pub fn temperature_softmax(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let xs = self.check(x)?;
        if !(tau > 0.0) {
            return Err(GdaipError::Input(format!("temperature must be positive, got {tau}")));
        }
        Ok(self.push(Op::TemperatureSoftmax { x, tau }, xs))
    }

    /// Mean of `-ln p[row, class]` over `(row, class)` targets.
    pub fn cross_entropy_mean(
        &mut self,
        p: NodeId,
        targets: impl Into<Arc<[(usize, usize)]>>,
    ) -> Result<NodeId> {
        let ps = self.check(p)?;
        let targets = targets.into();
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= ps.0 || c >= ps.1) {
            return Err(shape_err(format!(
                "cross_entropy_mean: target ({r}, {c}) outside {ps:?}"
            )));
        }
        Ok(self.push(Op::CrossEntropyMean { p, targets }, (1, 1)))
    }

    /// Mean Shannon entropy of the listed rows.
    pub fn entropy_mean(&mut self, p: NodeId, rows: impl Into<Arc<[usize]>>) -> Result<NodeId> {
        let ps = self.check(p)?;
        let rows = rows.into();
        if let Some(&r) = rows.iter().find(|&&r| r >= ps.0) {
            return Err(shape_err(format!("entropy_mean: row {r} outside {ps:?}")));
        }
        Ok(self.push(Op::EntropyMean { p, rows }, (1, 1)))
    }

    pub fn scalar_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != (1, 1) || sb != (1, 1) {
            return Err(shape_err(format!("scalar_add on {sa:?} and {sb:?}")));
        }
        Ok(self.push(Op::ScalarAdd { a, b }, (1, 1)))
    }

    pub fn scalar_scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xs = self.check(x)?;
        Ok(self.push(Op::ScalarScale { x, factor }, xs))
    }

    /// Identity forward; multiplies the incoming adjoint by `-kappa` backward.
    pub fn gradient_reverse(&mut self, x: NodeId, kappa: f64) -> Result<NodeId> {
        let xs = self.check(x)?;
        if !(kappa >= 0.0) {
            return Err(GdaipError::Input(format!("reversal scale must be >= 0, got {kappa}")));
        }
        Ok(self.push(Op::GradientReverse { x, kappa }, xs))
    }

    pub fn head_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.check(
            *parts
                .first()
                .ok_or_else(|| shape_err("head_concat needs at least one part".into()))?,
        )?;
        let mut cols = 0;
        for &p in parts {
            let ps = self.check(p)?;
            if ps.0 != first.0 {
                return Err(shape_err(format!("head_concat: row counts {} vs {}", ps.0, first.0)));
            }
            cols += ps.1;
        }
        Ok(self.push(Op::HeadConcat { parts: parts.to_vec() }, (first.0, cols)))
    }

    /// Binds a leaf value. The value persists across forward passes.
    pub fn bind(&mut self, id: NodeId, value: Matrix) -> Result<()> {
        let node = self
            .nodes
            .get(id.0)
            .ok_or_else(|| shape_err(format!("node {} does not exist", id.0)))?;
        if !matches!(node.op, Op::Parameter | Op::Input) {
            return Err(GdaipError::Input(format!("node {} is not a leaf", id.0)));
        }
        if value.dim() != node.shape {
            return Err(shape_err(format!(
                "binding {:?} to node {} of shape {:?}",
                value.dim(),
                id.0,
                node.shape
            )));
        }
        self.values[id.0] = Some(value);
        Ok(())
    }

    /// Mutable access to a bound leaf, used for in-place parameter updates.
    pub fn leaf_mut(&mut self, id: NodeId) -> Option<&mut Matrix> {
        match self.nodes.get(id.0)?.op {
            Op::Parameter | Op::Input => self.values[id.0].as_mut(),
            _ => None,
        }
    }

    pub fn value(&self, id: NodeId) -> Option<&Matrix> {
        self.values.get(id.0)?.as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.value(id).filter(|v| v.dim() == (1, 1)).map(|v| v[[0, 0]])
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0)?.as_ref()
    }

    /// Gradient of a node, zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(self.nodes[id.0].shape))
    }

    /// Evaluates every non-leaf node in index order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = &self.nodes[i].op;
            if matches!(op, Op::Parameter | Op::Input) {
                if self.values[i].is_none() {
                    return Err(GdaipError::Input(format!("leaf node {i} is unbound")));
                }
                continue;
            }
            let (value, cache) = eval(op, &self.values);
            self.values[i] = Some(value);
            self.attention[i] = cache;
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.check(loss)?;
        if shape != (1, 1) {
            return Err(GdaipError::Input(format!(
                "backward needs a scalar loss, node {} has shape {shape:?}",
                loss.0
            )));
        }
        self.backward_seeded(loss, Matrix::from_elem((1, 1), 1.0))
    }

    /// Reverse pass from an arbitrary output with a given upstream adjoint
    /// (a vector-Jacobian product).
    pub fn backward_seeded(&mut self, output: NodeId, adjoint: Matrix) -> Result<()> {
        let shape = self.check(output)?;
        if adjoint.dim() != shape {
            return Err(shape_err(format!(
                "adjoint {:?} for output of shape {shape:?}",
                adjoint.dim()
            )));
        }
        if self.values[output.0].is_none() {
            return Err(GdaipError::Input("backward called before forward".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(adjoint);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            let contributions = backprop(
                &self.nodes[i].op,
                &upstream,
                &self.values,
                self.values[i].as_ref().expect("forward ran"),
                self.attention[i].as_ref(),
                &self.nodes,
            );
            self.grads[i] = Some(upstream);
            for (pred, g) in contributions {
                match &mut self.grads[pred.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn val(values: &[Option<Matrix>], id: NodeId) -> &Matrix {
    values[id.0].as_ref().expect("predecessor evaluated")
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn eval(op: &Op, values: &[Option<Matrix>]) -> (Matrix, Option<AttentionCache>) {
    let out = match op {
        Op::Parameter | Op::Input => unreachable!("leaves are bound, not evaluated"),
        Op::DenseLinear { x, w, transpose_w } => {
            let (x, w) = (val(values, *x), val(values, *w));
            if *transpose_w {
                x.dot(&w.t())
            } else {
                x.dot(w)
            }
        }
        Op::LeakyRectifier { x, slope } => val(values, *x).mapv(|v| leaky(v, *slope)),
        Op::ExponentialLinear { x } => {
            val(values, *x).mapv(|v| if v > 0.0 { v } else { v.exp_m1() })
        }
        Op::NeighborAttention { z, a, hood, slope } => {
            let (out, cache) = attention_forward(val(values, *z), val(values, *a), hood, *slope);
            return (out, Some(cache));
        }
        Op::RowL2Normalize { x } => {
            let mut y = val(values, *x).clone();
            for mut row in y.axis_iter_mut(Axis(0)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inv = 1.0 / (norm + NORM_EPS);
                row.mapv_inplace(|v| v * inv);
            }
            y
        }
        Op::TemperatureSoftmax { x, tau } => {
            let mut y = val(values, *x).clone();
            for mut row in y.axis_iter_mut(Axis(0)) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| ((v - max) / tau).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            y
        }
        Op::CrossEntropyMean { p, targets } => {
            let p = val(values, *p);
            let total: f64 = targets.iter().map(|&(r, c)| -p[[r, c]].max(LOG_EPS).ln()).sum();
            let loss = if targets.is_empty() {
                0.0
            } else {
                total / targets.len() as f64
            };
            Matrix::from_elem((1, 1), loss)
        }
        Op::EntropyMean { p, rows } => {
            let p = val(values, *p);
            let total: f64 = rows
                .iter()
                .map(|&r| {
                    p.row(r)
                        .iter()
                        .map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 })
                        .sum::<f64>()
                })
                .sum();
            let loss = if rows.is_empty() {
                0.0
            } else {
                total / rows.len() as f64
            };
            Matrix::from_elem((1, 1), loss)
        }
        Op::ScalarAdd { a, b } => val(values, *a) + val(values, *b),
        Op::ScalarScale { x, factor } => val(values, *x) * *factor,
        Op::GradientReverse { x, .. } => val(values, *x).clone(),
        Op::HeadConcat { parts } => {
            let views: Vec<_> = parts.iter().map(|p| val(values, *p).view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("head shapes checked at construction")
        }
    };
    (out, None)
}

fn attention_forward(
    z: &Matrix,
    a: &Matrix,
    hood: &Neighborhoods,
    slope: f64,
) -> (Matrix, AttentionCache) {
    let (n, k) = z.dim();
    let z = z.as_standard_layout();
    let zs = z.as_slice().expect("standard layout");
    let a = a.as_standard_layout();
    let (a_src, a_nbr) = a.as_slice().expect("standard layout").split_at(k);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let src: Vec<f64> = zs.chunks_exact(k).map(|r| dot(r, a_src)).collect();
    let nbr: Vec<f64> = zs.chunks_exact(k).map(|r| dot(r, a_nbr)).collect();
    let mut out = vec![0.0; n * k];
    let mut alpha = vec![0.0; hood.edge_slots()];
    let mut pre = vec![0.0; hood.edge_slots()];
    for (i, row) in out.chunks_exact_mut(k).enumerate() {
        let (lo, hi) = (hood.offsets[i], hood.offsets[i + 1]);
        let mut max = f64::NEG_INFINITY;
        for e in lo..hi {
            pre[e] = src[i] + nbr[hood.indices[e]];
            max = max.max(leaky(pre[e], slope));
        }
        let mut sum = 0.0;
        for e in lo..hi {
            alpha[e] = (leaky(pre[e], slope) - max).exp();
            sum += alpha[e];
        }
        for e in lo..hi {
            alpha[e] /= sum;
            let j = hood.indices[e];
            for (o, x) in row.iter_mut().zip(&zs[j * k..(j + 1) * k]) {
                *o += alpha[e] * x;
            }
        }
    }
    let out = Matrix::from_shape_vec((n, k), out).expect("sized above");
    (out, AttentionCache { alpha, pre })
}

/// Adjoint contributions of one node to its predecessors that need them.
fn backprop(
    op: &Op,
    g: &Matrix,
    values: &[Option<Matrix>],
    output: &Matrix,
    cache: Option<&AttentionCache>,
    nodes: &[Node],
) -> Vec<(NodeId, Matrix)> {
    let wants = |id: &NodeId| nodes[id.0].needs_grad;
    let mut out = Vec::new();
    match op {
        Op::Parameter | Op::Input => {}
        Op::DenseLinear { x, w, transpose_w } => {
            let (xv, wv) = (val(values, *x), val(values, *w));
            if wants(x) {
                out.push((*x, if *transpose_w { g.dot(wv) } else { g.dot(&wv.t()) }));
            }
            if wants(w) {
                out.push((*w, if *transpose_w { g.t().dot(xv) } else { xv.t().dot(g) }));
            }
        }
        Op::LeakyRectifier { x, slope } => {
            let mut dx = g.clone();
            Zip::from(&mut dx).and(val(values, *x)).for_each(|d, &v| {
                if v <= 0.0 {
                    *d *= slope;
                }
            });
            out.push((*x, dx));
        }
        Op::ExponentialLinear { x } => {
            // for v <= 0 the derivative exp(v) equals y + 1
            let mut dx = g.clone();
            Zip::from(&mut dx)
                .and(val(values, *x))
                .and(output)
                .for_each(|d, &v, &y| {
                    if v <= 0.0 {
                        *d *= y + 1.0;
                    }
                });
            out.push((*x, dx));
        }
        Op::NeighborAttention { z, a, hood, slope } => {
            let cache = cache.expect("attention cache written in forward");
            let (dz, da) = attention_backward(val(values, *z), val(values, *a), hood, *slope, cache, g);
            if wants(z) {
                out.push((*z, dz));
            }
            if wants(a) {
                out.push((*a, da));
            }
        }
        Op::RowL2Normalize { x } => {
            let xv = val(values, *x);
            let mut dx = Matrix::zeros(xv.dim());
            for ((xr, gr), mut dr) in xv
                .axis_iter(Axis(0))
                .zip(g.axis_iter(Axis(0)))
                .zip(dx.axis_iter_mut(Axis(0)))
            {
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm + NORM_EPS;
                dr.assign(&gr);
                dr.mapv_inplace(|v| v / denom);
                if norm > 0.0 {
                    let xg = xr.dot(&gr);
                    dr.scaled_add(-xg / (norm * denom * denom), &xr);
                }
            }
            out.push((*x, dx));
        }
        Op::TemperatureSoftmax { x, tau } => {
            let mut dx = Matrix::zeros(output.dim());
            for ((pr, gr), mut dr) in output
                .axis_iter(Axis(0))
                .zip(g.axis_iter(Axis(0)))
                .zip(dx.axis_iter_mut(Axis(0)))
            {
                let pg = pr.dot(&gr);
                Zip::from(&mut dr)
                    .and(&pr)
                    .and(&gr)
                    .for_each(|d, &p, &gv| *d = p * (gv - pg) / tau);
            }
            out.push((*x, dx));
        }
        Op::CrossEntropyMean { p, targets } => {
            let pv = val(values, *p);
            let mut dp = Matrix::zeros(pv.dim());
            if !targets.is_empty() {
                let scale = g[[0, 0]] / targets.len() as f64;
                for &(r, c) in targets.iter() {
                    let q = pv[[r, c]];
                    if q > LOG_EPS {
                        dp[[r, c]] -= scale / q;
                    }
                }
            }
            out.push((*p, dp));
        }
        Op::EntropyMean { p, rows } => {
            let pv = val(values, *p);
            let mut dp = Matrix::zeros(pv.dim());
            if !rows.is_empty() {
                let scale = g[[0, 0]] / rows.len() as f64;
                for &r in rows.iter() {
                    for c in 0..pv.ncols() {
                        let q = pv[[r, c]];
                        if q > 0.0 {
                            dp[[r, c]] -= scale * (q.ln() + 1.0);
                        }
                    }
                }
            }
            out.push((*p, dp));
        }
        Op::ScalarAdd { a, b } => {
            if wants(a) {
                out.push((*a, g.clone()));
            }
            if wants(b) {
                out.push((*b, g.clone()));
            }
        }
        Op::ScalarScale { x, factor } => out.push((*x, g * *factor)),
        Op::GradientReverse { x, kappa } => out.push((*x, g * -*kappa)),
        Op::HeadConcat { parts } => {
            let mut col = 0;
            for p in parts {
                let w = nodes[p.0].shape.1;
                if wants(p) {
                    out.push((*p, g.slice(s![.., col..col + w]).to_owned()));
                }
                col += w;
            }
        }
    }
    out.retain(|(id, _)| wants(id));
    out
}

fn attention_backward(
    z: &Matrix,
    a: &Matrix,
    hood: &Neighborhoods,
    slope: f64,
    cache: &AttentionCache,
    g: &Matrix,
) -> (Matrix, Matrix) {
    let (n, k) = z.dim();
    let z = z.as_standard_layout();
    let zs = z.as_slice().expect("standard layout");
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let a = a.as_standard_layout();
    let (a_src, a_nbr) = a.as_slice().expect("standard layout").split_at(k);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut dz = vec![0.0; n * k];
    let mut d_src = vec![0.0; n];
    let mut d_nbr = vec![0.0; n];
    let mut d_alpha = Vec::new();
    for i in 0..n {
        let (lo, hi) = (hood.offsets[i], hood.offsets[i + 1]);
        let gi = &gs[i * k..(i + 1) * k];
        d_alpha.clear();
        let mut weighted = 0.0;
        for e in lo..hi {
            let j = hood.indices[e];
            let da = dot(gi, &zs[j * k..(j + 1) * k]);
            weighted += cache.alpha[e] * da;
            d_alpha.push(da);
        }
        for (off, e) in (lo..hi).enumerate() {
            let j = hood.indices[e];
            let de = cache.alpha[e] * (d_alpha[off] - weighted);
            let du = if cache.pre[e] > 0.0 { de } else { de * slope };
            d_src[i] += du;
            d_nbr[j] += du;
            for (d, x) in dz[j * k..(j + 1) * k].iter_mut().zip(gi) {
                *d += cache.alpha[e] * x;
            }
        }
    }
    let mut da = vec![0.0; 2 * k];
    for i in 0..n {
        let zi = &zs[i * k..(i + 1) * k];
        for c in 0..k {
            dz[i * k + c] += d_src[i] * a_src[c] + d_nbr[i] * a_nbr[c];
            da[c] += d_src[i] * zi[c];
            da[k + c] += d_nbr[i] * zi[c];
        }
    }
    (
        Matrix::from_shape_vec((n, k), dz).expect("sized above"),
        Matrix::from_shape_vec((1, 2 * k), da).expect("sized above"),
    )
}

/// How [`grad_check`] draws the op's inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputDistribution {
    /// Independent uniform entries in `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// Every row is the uniform distribution `1/cols`.
    UniformRows,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub distribution: InputDistribution,
    /// Temperature used for [`OpKind::TemperatureSoftmax`].
    pub tau: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            rows: 5,
            cols: 4,
            seed: 0,
            distribution: InputDistribution::Uniform { low: -1.0, high: 1.0 },
            tau: 0.05,
        }
    }
}

/// Distance from a non-differentiable point below which inputs are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const LEAKY_SLOPE: f64 = 0.2;

/// Compares analytic vector-Jacobian products of one op against central
/// finite differences and returns
/// `max |analytic - numeric| / max(1, |numeric|)` over all input coordinates.
pub fn grad_check(kind: OpKind, spec: &GradCheckSpec, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols) = (spec.rows, spec.cols);
    for _attempt in 0..64 {
        let draw = |r: usize, c: usize, rng: &mut ChaCha8Rng| -> Matrix {
            match spec.distribution {
                InputDistribution::Uniform { low, high } => {
                    Matrix::from_shape_fn((r, c), |_| rng.random_range(low..high))
                }
                InputDistribution::UniformRows => Matrix::from_elem((r, c), 1.0 / c as f64),
            }
        };
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let out = match kind {
            OpKind::Parameter | OpKind::Input => {
                return Err(GdaipError::Input(format!("{kind:?} has no derivative to check")))
            }
            OpKind::DenseLinear => {
                let x = tape.parameter(rows, cols);
                let w = tape.parameter(cols, 3);
                leaves.push((x, draw(rows, cols, &mut rng)));
                leaves.push((w, draw(cols, 3, &mut rng)));
                tape.dense_linear(x, w)?
            }
            OpKind::LeakyRectifier => {
                let x = tape.parameter(rows, cols);
                leaves.push((x, draw(rows, cols, &mut rng)));
                tape.leaky_rectifier(x, LEAKY_SLOPE)?
            }
            OpKind::ExponentialLinear => {
                let x = tape.parameter(rows, cols);
                leaves.push((x, draw(rows, cols, &mut rng)));
                tape.exponential_linear(x)?
            }
            OpKind::NeighborAttention => {
                // ring plus a chord so neighborhoods have unequal sizes
                let lists = (0..rows)
                    .map(|i| {
                        let mut l = vec![(i + 1) % rows];
                        if i == 0 && rows > 3 {
                            l.push(rows / 2);
                        }
                        l
                    })
                    .collect();
                let adj = AdjacencyMatrix::from_neighbor_lists(lists)?;
                let hood = Arc::new(Neighborhoods::with_self_loops(&adj));
                let z = tape.parameter(rows, cols);
                let a = tape.parameter(1, 2 * cols);
                leaves.push((z, draw(rows, cols, &mut rng)));
                leaves.push((a, draw(1, 2 * cols, &mut rng)));
                tape.neighbor_attention(z, a, hood, LEAKY_SLOPE)?
            }
            OpKind::RowL2Normalize => {
                let x = tape.parameter(rows, cols);
                leaves.push((x, draw(rows, cols, &mut rng)));
                tape.row_l2_normalize(x)?
            }
            OpKind::TemperatureSoftmax => {
                let x = tape.parameter(rows, cols);
                leaves.push((x, draw(rows, cols, &mut rng)));
                tape.temperature_softmax(x, spec.tau)?
            }
            OpKind::CrossEntropyMean => {
                let p = tape.parameter(rows, cols);
                let value = match spec.distribution {
                    InputDistribution::Uniform { .. } => {
                        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0))
                    }
                    InputDistribution::UniformRows => draw(rows, cols, &mut rng),
                };
                leaves.push((p, value));
                let targets: Vec<(usize, usize)> =
                    (0..rows).map(|r| (r, rng.random_range(0..cols))).collect();
                tape.cross_entropy_mean(p, targets)?
            }
            OpKind::EntropyMean => {
                let p = tape.parameter(rows, cols);
                let value = match spec.distribution {
                    InputDistribution::Uniform { .. } => {
                        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0))
                    }
                    InputDistribution::UniformRows => draw(rows, cols, &mut rng),
                };
                leaves.push((p, value));
                let rows_used: Vec<usize> = (0..rows).filter(|r| r % 3 != 1).collect();
                tape.entropy_mean(p, rows_used)?
            }
            OpKind::ScalarAdd => {
                let a = tape.parameter(1, 1);
                let b = tape.parameter(1, 1);
                leaves.push((a, draw(1, 1, &mut rng)));
                leaves.push((b, draw(1, 1, &mut rng)));
                tape.scalar_add(a, b)?
            }
            OpKind::ScalarScale => {
                let x = tape.parameter(rows, cols);
                leaves.push((x, draw(rows, cols, &mut rng)));
                tape.scalar_scale(x, -1.7)?
            }
            OpKind::GradientReverse => {
                let x = tape.parameter(rows, cols);
                leaves.push((x, draw(rows, cols, &mut rng)));
                // the reversal is deliberately not a derivative: check the
                // reversed adjoint against -kappa times the identity Jacobian
                let r = tape.gradient_reverse(x, 0.7)?;
                tape.scalar_scale(r, 1.0)?
            }
            OpKind::HeadConcat => {
                let a = tape.parameter(rows, cols);
                let b = tape.parameter(rows, 2);
                leaves.push((a, draw(rows, cols, &mut rng)));
                leaves.push((b, draw(rows, 2, &mut rng)));
                tape.head_concat(&[a, b])?
            }
        };
        for (id, v) in &leaves {
            tape.bind(*id, v.clone())?;
        }
        tape.forward()?;
        if near_kink(kind, &tape, &leaves) {
            continue;
        }
        let adjoint = Matrix::from_shape_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0));
        tape.backward_seeded(out, adjoint.clone())?;
        let analytic: Vec<Matrix> = leaves.iter().map(|(id, _)| tape.grad_or_zeros(*id)).collect();

        let probe = |tape: &mut Tape| -> Result<f64> {
            tape.forward()?;
            Ok((tape.value(out).expect("evaluated") * &adjoint).sum())
        };
        let mut worst: f64 = 0.0;
        for (li, (id, base)) in leaves.iter().enumerate() {
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let mut plus = base.clone();
                plus[[r, c]] += h;
                tape.bind(*id, plus)?;
                let f_plus = probe(&mut tape)?;
                let mut minus = base.clone();
                minus[[r, c]] -= h;
                tape.bind(*id, minus)?;
                let f_minus = probe(&mut tape)?;
                tape.bind(*id, base.clone())?;
                let mut numeric = (f_plus - f_minus) / (2.0 * h);
                if kind == OpKind::GradientReverse {
                    numeric *= -0.7;
                }
                let err = (analytic[li][[r, c]] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
        return Ok(worst);
    }
    Err(GdaipError::Input(format!(
        "grad_check({kind:?}): could not draw inputs away from kinks"
    )))
}

fn near_kink(kind: OpKind, tape: &Tape, leaves: &[(NodeId, Matrix)]) -> bool {
    match kind {
        OpKind::LeakyRectifier | OpKind::ExponentialLinear => {
            leaves[0].1.iter().any(|v| v.abs() < KINK_MARGIN)
        }
        OpKind::NeighborAttention => {
            let id = NodeId(tape.len() - 1);
            tape.attention[id.0]
                .as_ref()
                .is_some_and(|c| c.pre.iter().any(|v| v.abs() < KINK_MARGIN))
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parameter_forward_is_identity() {
        let mut tape = Tape::new();
        let p = tape.parameter(2, 2);
        tape.bind(p, array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        tape.forward().unwrap();
        assert_eq!(tape.value(p).unwrap(), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn identity_weight_dense_linear() {
        let mut tape = Tape::new();
        let x = tape.input(3, 2);
        let w = tape.parameter(2, 2);
        let y = tape.dense_linear(x, w).unwrap();
        let xv = array![[1.0, -2.0], [0.5, 3.0], [0.0, 1.0]];
        tape.bind(x, xv.clone()).unwrap();
        tape.bind(w, Matrix::eye(2)).unwrap();
        tape.forward().unwrap();
        assert_eq!(tape.value(y).unwrap(), &xv);
    }

    #[test]
    fn leaky_rectifier_values() {
        let mut tape = Tape::new();
        let x = tape.input(1, 2);
        let y = tape.leaky_rectifier(x, 0.2).unwrap();
        tape.bind(x, array![[-1.0, 2.0]]).unwrap();
        tape.forward().unwrap();
        assert_eq!(tape.value(y).unwrap(), &array![[-0.2, 2.0]]);
    }

    #[test]
    fn unbound_leaf_and_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.input(2, 3);
        let w = tape.parameter(2, 3);
        assert!(matches!(tape.dense_linear(x, w), Err(GdaipError::Shape(_))));
        assert!(tape.bind(x, Matrix::zeros((3, 2))).is_err());
        assert!(tape.forward().is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.parameter(2, 2);
        tape.bind(p, Matrix::zeros((2, 2))).unwrap();
        tape.forward().unwrap();
        assert!(tape.backward(p).is_err());
    }

    /// `sum(x)` realised as an all-ones adjoint.
    fn sum_gradient(kappa: Option<f64>) -> Matrix {
        let mut tape = Tape::new();
        let x = tape.parameter(3, 2);
        let out = match kappa {
            Some(k) => tape.gradient_reverse(x, k).unwrap(),
            None => tape.scalar_scale(x, 1.0).unwrap(),
        };
        tape.bind(x, Matrix::from_elem((3, 2), 0.3)).unwrap();
        tape.forward().unwrap();
        assert_eq!(tape.value(out).unwrap(), tape.value(x).unwrap());
        tape.backward_seeded(out, Matrix::ones((3, 2))).unwrap();
        tape.grad_or_zeros(x)
    }

    #[test]
    fn sum_and_reversed_sum() {
        assert_eq!(sum_gradient(None), Matrix::ones((3, 2)));
        assert_eq!(sum_gradient(Some(1.0)), -Matrix::ones((3, 2)));
        assert_eq!(sum_gradient(Some(0.25)), Matrix::from_elem((3, 2), -0.25));
    }

    #[test]
    fn inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(2, 2);
        let w = tape.parameter(2, 2);
        let y = tape.dense_linear(x, w).unwrap();
        let p = tape.temperature_softmax(y, 1.0).unwrap();
        let l = tape.entropy_mean(p, vec![0, 1]).unwrap();
        tape.bind(x, array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        tape.bind(w, array![[0.1, 0.2], [0.3, -0.4]]).unwrap();
        tape.forward().unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn chain_of_two_scales_multiplies() {
        let mut tape = Tape::new();
        let x = tape.parameter(1, 1);
        let y = tape.scalar_scale(x, 3.0).unwrap();
        let z = tape.scalar_scale(y, -0.5).unwrap();
        tape.bind(x, array![[2.0]]).unwrap();
        tape.forward().unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap()[[0, 0]], -1.5);
    }

    #[test]
    fn self_loops_are_inserted_in_order() {
        let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![2], vec![], vec![]]).unwrap();
        let hood = Neighborhoods::with_self_loops(&adj);
        assert_eq!(hood.of(0), &[0, 2]);
        assert_eq!(hood.of(1), &[1]);
        assert_eq!(hood.of(2), &[0, 2]);
    }

    #[test]
    fn every_op_passes_finite_differences() {
        for kind in OpKind::DIFFERENTIABLE {
            for seed in 0..3 {
                let spec = GradCheckSpec {
                    seed,
                    ..GradCheckSpec::default()
                };
                let err = grad_check(kind, &spec, 1e-5).unwrap();
                assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn named_grad_check_thresholds() {
        let spec = GradCheckSpec::default();
        assert!(grad_check(OpKind::DenseLinear, &spec, 1e-5).unwrap() < 1e-7);
        assert!(grad_check(OpKind::TemperatureSoftmax, &spec, 1e-5).unwrap() < 1e-4);
        let uniform = GradCheckSpec {
            distribution: InputDistribution::UniformRows,
            ..spec
        };
        assert!(grad_check(OpKind::EntropyMean, &uniform, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn repeated_passes_are_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let z = tape.parameter(4, 3);
            let a = tape.parameter(1, 6);
            let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![1, 2], vec![3], vec![], vec![]]).unwrap();
            let hood = Arc::new(Neighborhoods::with_self_loops(&adj));
            let o = tape.neighbor_attention(z, a, hood, 0.2).unwrap();
            let n = tape.row_l2_normalize(o).unwrap();
            let p = tape.temperature_softmax(n, 0.05).unwrap();
            let l = tape.entropy_mean(p, vec![0, 1, 2, 3]).unwrap();
            tape.bind(z, Matrix::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64 * 0.7).sin())).unwrap();
            tape.bind(a, Matrix::from_shape_fn((1, 6), |(_, j)| (j as f64).cos())).unwrap();
            tape.forward().unwrap();
            tape.backward(l).unwrap();
            (tape.grad_or_zeros(z), tape.grad_or_zeros(a))
        };
        assert_eq!(run(), run());
    }
}

