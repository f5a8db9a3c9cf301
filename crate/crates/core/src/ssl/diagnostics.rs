//! Alignment / uniformity decomposition and related numerical diagnostics.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, CompGraph, DenseMatrix};
use crate::ssl::loss::loss_simclr;

/// Mean squared distance between matching rows.
pub fn alignment(f1: &DenseMatrix, f2: &DenseMatrix) -> Result<f64> {
    f1.same_shape(f2, "alignment")?;
    if f1.rows() == 0 {
        return Err(Error::Contract("alignment of an empty batch".into()));
    }
    Ok(f1.sub(f2)?.as_slice().iter().map(|v| v * v).sum::<f64>() / f1.rows() as f64)
}

fn log_mean_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + (x - m).exp(), n + 1));
    m + (s / n as f64).ln()
}

/// `(alignment, uniformity)` over `2B` interleaved rows.
///
/// Alignment is the mean `‖f(x) − f(x̃)‖²` over pairs. Uniformity is the mean
/// over anchors of `log mean_neg exp(f(x⁻)ᵀ f(x) / τ)`, where the negatives of
/// an anchor are all rows except itself and its partner.
pub fn align_uniform_decompose(reps: &DenseMatrix, tau: f64) -> Result<(f64, f64)> {
    let n = reps.rows();
    if n % 2 != 0 || n < 4 {
        return Err(shape_err("align_uniform", format!("{n} rows, need an even count >= 4")));
    }
    let (a, b) = reps.deinterleave_rows();
    let align = alignment(&a, &b)?;
    let sim = reps.matmul_nt(reps)?;
    let unif = (0..n)
        .map(|i| log_mean_exp((0..n).filter(move |&j| j != i && j != (i ^ 1)).map(|j| sim[(i, j)] / tau)))
        .sum::<f64>()
        / n as f64;
    Ok((align, unif))
}

/// `|L_simclr − log(2B−1) − (alignment/(2τ) − 1/τ + uniformity)|`.
///
/// The bracket is the large-batch form of the InfoNCE loss; the residual is
/// the share of the positive term in the denominator and vanishes as B grows.
pub fn simclr_decomposition_gap(reps: &DenseMatrix, tau: f64) -> Result<f64> {
    let loss = loss_simclr(reps, tau)?;
    let (align, unif) = align_uniform_decompose(reps, tau)?;
    let n = reps.rows() as f64;
    Ok((loss - (n - 1.0).ln() - (align / (2.0 * tau) - 1.0 / tau + unif)).abs())
}

/// Second-order cumulant expansion `log E e^X ≈ E X + Var X / 2`.
/// Returns `(exact, approximation)`.
pub fn log_mean_exp_taylor(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Contract("taylor diagnostic needs samples".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((log_mean_exp(xs.iter().copied()), mean + var / 2.0))
}

/// Diagonal and off-diagonal parts of the redundancy penalty,
/// `(Σ_a (1 − C_aa)², Σ_{a≠b} C_ab²)`.
pub fn barlow_terms(r1: &DenseMatrix, r2: &DenseMatrix) -> Result<(f64, f64)> {
    r1.same_shape(r2, "barlow_terms")?;
    let mut g = CompGraph::new();
    let a = g.constant(r1.clone());
    let b = g.constant(r2.clone());
    let za = g.batch_standardize(a)?;
    let zb = g.batch_standardize(b)?;
    let c = g.value(za).matmul_tn(g.value(zb))?.scale(1.0 / r1.rows() as f64);
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            if i == j {
                diag += (1.0 - c[(i, j)]).powi(2);
            } else {
                off += c[(i, j)].powi(2);
            }
        }
    }
    Ok((diag, off))
}

/// `‖u − v‖² − (2 − 2uᵀv)` for a pair of unit vectors.
pub fn sphere_identity_residual(u: &[f64], v: &[f64]) -> f64 {
    let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
    d2 - (2.0 - 2.0 * dot(u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::Lcg;

    #[test]
    fn identical_pairs_have_zero_alignment() {
        let a = Lcg::new(1).unit_rows(6, 4);
        let reps = DenseMatrix::interleave_rows(&a, &a).unwrap();
        let (al, _) = align_uniform_decompose(&reps, 0.1).unwrap();
        assert_eq!(al, 0.0);
    }

    #[test]
    fn uniformity_hand_value() {
        // anchors 0,1 see negatives {e1, −e1}: log cosh 1 each;
        // anchor 2 sees {e1, e1}: 1; anchor 3 sees {e1, e1} at −1: −1
        let reps = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let (_, u) = align_uniform_decompose(&reps, 1.0).unwrap();
        let c = (1f64.cosh()).ln() / 2.0;
        assert!((u - c).abs() < 1e-12);
    }

    #[test]
    fn taylor_is_exact_to_second_order_for_small_spread() {
        let xs: Vec<f64> = (0..1000).map(|i| 0.01 * ((i as f64) * 0.37).sin()).collect();
        let (exact, approx) = log_mean_exp_taylor(&xs).unwrap();
        assert!((exact - approx).abs() < 1e-6);
    }

    #[test]
    fn barlow_diagonal_vanishes_for_equal_views() {
        let r = Lcg::new(4).matrix(16, 3);
        let (diag, off) = barlow_terms(&r, &r).unwrap();
        assert!(diag < 1e-20);
        assert!(off > 0.0);
    }
}
