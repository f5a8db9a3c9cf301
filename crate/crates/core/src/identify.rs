//! Linear identifiability checks between ground-truth latents and learned
//! representations.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{gram_deviation, least_squares, norm, DenseMatrix};
use crate::probe::{accuracy, ProbeModel};

/// Affine fit `rep ≈ A (z − z̄) + r̄` evaluated on a held-out tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMapFit {
    /// `d2 × d1`.
    pub a: DenseMatrix,
    pub latent_mean: Vec<f64>,
    pub rep_mean: Vec<f64>,
    /// Held-out R² per representation dimension.
    pub r2: Vec<f64>,
    pub mean_r2: f64,
    pub min_r2: f64,
    /// `trace(AAᵀ) / min(d1, d2)`.
    pub scale: f64,
    /// Scale-normalised deviation from orthonormal rows (or columns when d2 > d1).
    pub gram_deviation: f64,
    pub n_fit: usize,
    pub n_holdout: usize,
}

fn column_means(m: &DenseMatrix) -> Vec<f64> {
    (0..m.cols()).map(|c| m.column(c).iter().sum::<f64>() / m.rows() as f64).collect()
}

fn center(m: &DenseMatrix, means: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)] - means[c])
}

/// Least-squares map from latents (`n × d1`) to reps (`n × d2`). The last
/// `holdout_fraction` of rows is kept out of the fit and scored.
pub fn fit_a(latents: &DenseMatrix, reps: &DenseMatrix, holdout_fraction: f64) -> Result<LinearMapFit> {
    let (n, d1) = latents.shape();
    if reps.rows() != n {
        return Err(shape_err("fit_a", format!("{n} latents vs {} reps", reps.rows())));
    }
    if n < 5 * d1 {
        return Err(Error::Data(format!("{n} samples, need at least {} for {d1} latent dims", 5 * d1)));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Contract(format!("holdout fraction {holdout_fraction} outside (0, 1)")));
    }
    let n_hold = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - d1);
    let n_fit = n - n_hold;
    let fit_idx: Vec<usize> = (0..n_fit).collect();
    let hold_idx: Vec<usize> = (n_fit..n).collect();
    let (zf, rf) = (latents.select_rows(&fit_idx), reps.select_rows(&fit_idx));
    let zm = column_means(&zf);
    let rm = column_means(&rf);
    let fit = least_squares(&center(&zf, &zm), &center(&rf, &rm), true)?;
    let zh = center(&latents.select_rows(&hold_idx), &zm);
    let pred = zh.matmul(&fit.coef)?.add_row_broadcast(&DenseMatrix::row_vector(&rm))?;
    let r2 = crate::numerics::r_squared(&reps.select_rows(&hold_idx), &pred);
    let a = fit.coef.transpose();
    let d2 = a.rows();
    let gram = if d2 <= d1 { gram_deviation(&a)? } else { gram_deviation(&fit.coef)? };
    let scale = a.matmul_nt(&a)?.trace() / d1.min(d2) as f64;
    Ok(LinearMapFit {
        mean_r2: r2.iter().sum::<f64>() / r2.len() as f64,
        min_r2: r2.iter().copied().fold(f64::INFINITY, f64::min),
        r2,
        a,
        latent_mean: zm,
        rep_mean: rm,
        scale,
        gram_deviation: gram,
        n_fit,
        n_holdout: n_hold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullspaceReport {
    pub r_aug: f64,
    pub r_hold: f64,
    pub ratio: f64,
}

fn mean_image_norm(a: &DenseMatrix, dirs: &[Vec<f64>], what: &str) -> Result<f64> {
    if dirs.is_empty() {
        return Err(Error::Contract(format!("no {what} directions")));
    }
    let mut total = 0.0;
    for d in dirs {
        if d.len() != a.cols() {
            return Err(shape_err("nullspace_test", format!("direction of length {} for A with {} columns", d.len(), a.cols())));
        }
        if (norm(d) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("{what} direction has norm {}", norm(d))));
        }
        let img = a.matmul(&DenseMatrix::from_vec(d.len(), 1, d.clone())?)?;
        total += img.frobenius_norm();
    }
    Ok(total / dirs.len() as f64)
}

/// Mean `‖Aδz‖` over augmentation and hold-out directions, and their ratio.
pub fn nullspace_test(fit: &LinearMapFit, augmented: &[Vec<f64>], holdout: &[Vec<f64>]) -> Result<NullspaceReport> {
    let r_aug = mean_image_norm(&fit.a, augmented, "augmentation")?;
    let r_hold = mean_image_norm(&fit.a, holdout, "hold-out")?;
    Ok(NullspaceReport {
        r_aug,
        r_hold,
        ratio: r_aug / r_hold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenGap {
    pub seen_accuracy: f64,
    pub holdout_accuracy: f64,
    pub gap: f64,
    /// `None` for classes missing from either split.
    pub per_class: Vec<Option<f64>>,
}

pub fn seen_unseen_gap(
    probe: &ProbeModel,
    seen: &DenseMatrix,
    seen_labels: &[usize],
    holdout: &DenseMatrix,
    holdout_labels: &[usize],
) -> Result<SeenUnseenGap> {
    let seen_accuracy = accuracy(probe, seen, seen_labels)?;
    let holdout_accuracy = accuracy(probe, holdout, holdout_labels)?;
    let class_acc = |reps: &DenseMatrix, labels: &[usize], c: usize| -> Result<Option<f64>> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        accuracy(probe, &reps.select_rows(&idx), &vec![c; idx.len()]).map(Some)
    };
    let per_class = (0..probe.num_classes())
        .map(|c| {
            Ok(match (class_acc(seen, seen_labels, c)?, class_acc(holdout, holdout_labels, c)?) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeenUnseenGap {
        seen_accuracy,
        holdout_accuracy,
        gap: seen_accuracy - holdout_accuracy,
        per_class,
    })
}
