//! Reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::numerics::matrix::{dot, DenseMatrix};

/// Handle to a node inside a [`CompGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    LeakyRelu(NodeId, f64),
    /// Caches the per-row norms of the input.
    RowNormalize(NodeId, Vec<f64>),
    /// Caches the per-column standard deviations.
    BatchStandardize(NodeId, Vec<f64>),
    RowDot(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    /// Input and first row of the slice.
    SliceRows(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    /// Value copy that stops gradient flow.
    Detach,
    /// Mean over rows of `-logit[target] + logsumexp(logits excluding one column)`.
    /// Caches the row softmax over the active columns.
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: DenseMatrix,
    },
    /// `Σ_a (1 − C_aa)² + λ Σ_{a≠b} C_ab²` for a square cross-correlation.
    BarlowPenalty(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
    requires_grad: bool,
}

/// Recorded computation: parameters and constants as leaves, operations
/// appended as they are evaluated.
#[derive(Debug, Default, Clone)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> DenseMatrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// True when some gradient flowed into `id`.
    pub fn touched(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), v, rg)
    }

    /// `a + 1·bias` where `bias` is `1 × cols`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row_broadcast(self.value(bias))?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddBias(a, bias), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), v, rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(Op::Square(a), v, rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(Op::LeakyRelu(a, slope), v, rg)
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let input = self.value(a);
        let norms = input.row_norms();
        let v = input.row_normalize()?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::RowNormalize(a, norms), v, rg))
    }

    /// Per-column zero mean and unit (population) standard deviation.
    pub fn batch_standardize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (n, d) = x.shape();
        if n < 2 {
            return Err(Error::Degenerate(format!(
                "batch standardisation needs at least 2 rows, got {n}"
            )));
        }
        let mut out = x.clone();
        let mut stds = Vec::with_capacity(d);
        for c in 0..d {
            let mean = (0..n).map(|r| x[(r, c)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if !(std > 1e-8) {
                return Err(Error::Degenerate(format!(
                    "column {c} has batch standard deviation {std:e}"
                )));
            }
            for r in 0..n {
                out[(r, c)] = (x[(r, c)] - mean) / std;
            }
            stds.push(std);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::BatchStandardize(a, stds), out, rg))
    }

    /// Row-wise dot products, `n × 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "row_dot")?;
        let v = DenseMatrix::from_fn(va.rows(), 1, |r, _| dot(va.row(r), vb.row(r)));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::RowDot(a, b), v, rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err(
                "concat_cols",
                format!("{:?} | {:?}", va.shape(), vb.shape()),
            ));
        }
        let ca = va.cols();
        let v = DenseMatrix::from_fn(va.rows(), ca + vb.cols(), |r, c| {
            if c < ca {
                va[(r, c)]
            } else {
                vb[(r, c - ca)]
            }
        });
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), v, rg))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(a);
        if start + len > src.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} of a {}-row input", start + len, src.rows()),
            ));
        }
        let cols = src.cols();
        let v = DenseMatrix::from_vec(len, cols, src.as_slice()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows(a, start), v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DenseMatrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = DenseMatrix::filled(1, 1, x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), v, rg)
    }

    /// Stop-gradient: same value, no gradient flows back into `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::Detach, v, false)
    }

    /// Mean softmax cross-entropy over rows. `exclude[i]` removes one column
    /// of row `i` from the normaliser (SimCLR drops the anchor itself).
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        exclude: Option<Vec<usize>>,
    ) -> Result<NodeId> {
        let l = self.value(logits);
        let (n, m) = l.shape();
        if targets.len() != n || exclude.as_ref().is_some_and(|e| e.len() != n) {
            return Err(shape_err(
                "softmax_xent",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        let mut probs = DenseMatrix::zeros(n, m);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let skip = exclude.as_ref().map(|e| e[i]);
            if t >= m || skip == Some(t) {
                return Err(Error::Contract(format!(
                    "row {i}: target {t} invalid for {m} columns"
                )));
            }
            let row = l.row(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != skip)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if Some(j) != skip {
                    let e = (v - max).exp();
                    probs[(i, j)] = e;
                    z += e;
                }
            }
            probs.row_mut(i).iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[t];
        }
        let v = DenseMatrix::filled(1, 1, total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            v,
            rg,
        ))
    }

    pub fn barlow_penalty(&mut self, c: NodeId, lambda: f64) -> Result<NodeId> {
        let m = self.value(c);
        if m.rows() != m.cols() {
            return Err(shape_err("barlow_penalty", format!("{:?}", m.shape())));
        }
        let d = m.rows();
        let mut total = 0.0;
        for a in 0..d {
            for b in 0..d {
                let v = m[(a, b)];
                total += if a == b { (1.0 - v).powi(2) } else { lambda * v * v };
            }
        }
        let rg = self.rg(&[c]);
        Ok(self.push(Op::BarlowPenalty(c, lambda), DenseMatrix::filled(1, 1, total), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut accum = |id: NodeId, delta: DenseMatrix| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Constant | Op::Param | Op::Detach => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accum(*a, g.matmul_nt(self.value(*b))?)?;
                }
                if needs(*b) {
                    accum(*b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::Transpose(a) => accum(*a, g.transpose())?,
            Op::AddBias(a, bias) => {
                if needs(*a) {
                    accum(*a, g.clone())?;
                }
                if needs(*bias) {
                    let cols = g.cols();
                    let mut gb = DenseMatrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (acc, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accum(*bias, gb)?;
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accum(*a, g.clone())?;
                }
                if needs(*b) {
                    accum(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(*a, g.clone())?;
                }
                if needs(*b) {
                    accum(*b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accum(*a, g.hadamard(self.value(*b))?)?;
                }
                if needs(*b) {
                    accum(*b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => accum(*a, g.scale(*s))?,
            Op::Square(a) => {
                let x = self.value(*a);
                accum(*a, g.zip_map(x, "square", |gv, xv| 2.0 * gv * xv)?)?;
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let s = *slope;
                accum(*a, g.zip_map(x, "leaky", |gv, xv| if xv > 0.0 { gv } else { s * gv })?)?;
            }
            Op::RowNormalize(a, norms) => {
                // dx = (dy − y·(yᵀdy)) / ‖x‖
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let proj = dot(yr, g.row(r));
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - yv * proj) / norms[r];
                    }
                }
                accum(*a, dx)?;
            }
            Op::BatchStandardize(a, stds) => {
                // dx = (dz − mean(dz) − z·mean(dz∘z)) / σ, per column
                let z = &node.value;
                let n = z.rows() as f64;
                let mut dx = DenseMatrix::zeros(z.rows(), z.cols());
                for c in 0..z.cols() {
                    let mut mg = 0.0;
                    let mut mgz = 0.0;
                    for r in 0..z.rows() {
                        mg += g[(r, c)];
                        mgz += g[(r, c)] * z[(r, c)];
                    }
                    mg /= n;
                    mgz /= n;
                    for r in 0..z.rows() {
                        dx[(r, c)] = (g[(r, c)] - mg - z[(r, c)] * mgz) / stds[c];
                    }
                }
                accum(*a, dx)?;
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale_rows = |m: &DenseMatrix| {
                    let mut out = m.clone();
                    for r in 0..m.rows() {
                        let gr = g[(r, 0)];
                        out.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    out
                };
                if needs(*a) {
                    accum(*a, scale_rows(vb))?;
                }
                if needs(*b) {
                    accum(*b, scale_rows(va))?;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if needs(*a) {
                    accum(*a, DenseMatrix::from_fn(g.rows(), ca, |r, c| g[(r, c)]))?;
                }
                if needs(*b) {
                    accum(*b, DenseMatrix::from_fn(g.rows(), cb, |r, c| g[(r, ca + c)]))?;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut full = DenseMatrix::zeros(r, c);
                full.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                accum(*a, full)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accum(*a, DenseMatrix::filled(r, c, g[(0, 0)]))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                accum(*a, DenseMatrix::filled(r, c, g[(0, 0)] / (r * c) as f64))?;
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
                ..
            } => {
                let n = probs.rows() as f64;
                let scale = g[(0, 0)] / n;
                let mut dl = probs.scale(scale);
                for (i, &t) in targets.iter().enumerate() {
                    dl[(i, t)] -= scale;
                }
                accum(*logits, dl)?;
            }
            Op::BarlowPenalty(c, lambda) => {
                let m = self.value(*c);
                let s = g[(0, 0)];
                let dc = DenseMatrix::from_fn(m.rows(), m.cols(), |a, b| {
                    if a == b {
                        -2.0 * (1.0 - m[(a, b)]) * s
                    } else {
                        2.0 * lambda * m[(a, b)] * s
                    }
                });
                accum(*c, dc)?;
            }
        }
        Ok(())
    }
}
