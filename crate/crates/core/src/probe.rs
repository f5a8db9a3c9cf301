//! Linear classifier on frozen representations.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{AdamConfig, AdamState, CompGraph, DenseMatrix};
use crate::sampling::RandomStream;

/// `softmax(rep·W + b)` with `W: d2 × C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeModel {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
    /// Identifier of the encoder checkpoint the probe was fitted on.
    pub trained_on: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            adam: AdamConfig::default(),
        }
    }
}

impl ProbeModel {
    pub fn zeros(rep_dim: usize, num_classes: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(rep_dim, num_classes),
            bias: DenseMatrix::zeros(1, num_classes),
            trained_on: String::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn rep_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, reps: &DenseMatrix) -> Result<DenseMatrix> {
        if reps.cols() != self.rep_dim() {
            return Err(shape_err("probe", format!("reps have {} columns, probe expects {}", reps.cols(), self.rep_dim())));
        }
        reps.matmul(&self.weight)?.add_row_broadcast(&self.bias)
    }

    /// Row-wise class probabilities.
    pub fn probabilities(&self, reps: &DenseMatrix) -> Result<DenseMatrix> {
        let mut p = self.logits(reps)?;
        for r in 0..p.rows() {
            let row = p.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(p)
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, reps: &DenseMatrix) -> Result<Vec<usize>> {
        let l = self.logits(reps)?;
        Ok((0..l.rows())
            .map(|r| {
                l.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(l) => Err(Error::Data(format!("label {l} outside 0..{num_classes}"))),
        None => Ok(()),
    }
}

/// Minibatch Adam on the mean cross-entropy, weights starting at zero.
///
/// Returns the probe and human-readable warnings (classes absent from the
/// training labels).
pub fn train_probe(
    reps: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    training: &ProbeTraining,
    rs: &RandomStream,
) -> Result<(ProbeModel, Vec<String>)> {
    if reps.rows() != labels.len() {
        return Err(shape_err("train_probe", format!("{} reps vs {} labels", reps.rows(), labels.len())));
    }
    if reps.rows() == 0 || num_classes == 0 || training.batch_size == 0 {
        return Err(Error::Data("probe training needs samples, classes and a batch size".into()));
    }
    check_labels(labels, num_classes)?;
    let mut warnings = Vec::new();
    for c in 0..num_classes {
        if !labels.contains(&c) {
            warnings.push(format!("class {c} absent from probe training labels"));
        }
    }
    let mut probe = ProbeModel::zeros(reps.cols(), num_classes);
    let mut adam = AdamState::new(training.adam.clone());
    for epoch in 0..training.epochs {
        let perm = rs.fork(epoch as u64).permutation(reps.rows());
        for idx in perm.chunks(training.batch_size) {
            let mut g = CompGraph::new();
            let x = g.constant(reps.select_rows(idx));
            let w = g.param(probe.weight.clone());
            let b = g.param(probe.bias.clone());
            let h = g.matmul(x, w)?;
            let logits = g.add_bias(h, b)?;
            let loss = g.softmax_xent(logits, idx.iter().map(|&i| labels[i]).collect(), None)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite("probe cross-entropy".into()));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut [&mut probe.weight, &mut probe.bias], &[grads.wrt(w), grads.wrt(b)])?;
        }
    }
    Ok((probe, warnings))
}

/// Probability assigned to `target_class`.
pub fn predict_score(probe: &ProbeModel, rep: &[f64], target_class: usize) -> Result<f64> {
    if target_class >= probe.num_classes() {
        return Err(Error::Contract(format!("class {target_class} unknown to the probe")));
    }
    Ok(probe.probabilities(&DenseMatrix::row_vector(rep))?[(0, target_class)])
}

/// Per-row probability of each row's own label.
pub fn label_scores(probe: &ProbeModel, reps: &DenseMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(labels, probe.num_classes())?;
    let p = probe.probabilities(reps)?;
    Ok(labels.iter().enumerate().map(|(r, &l)| p[(r, l)]).collect())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probe: &ProbeModel, reps: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || reps.rows() != labels.len() {
        return Err(Error::Data(format!("accuracy over {} reps and {} labels", reps.rows(), labels.len())));
    }
    let pred = probe.predict(reps)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}
