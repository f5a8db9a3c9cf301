use crate::error::{shape_err, Error, Result};
use crate::numerics::matrix::DenseMatrix;

/// Result of [`least_squares`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    /// `d1 × d2` coefficients minimising `‖XB − Y‖_F`.
    pub coef: DenseMatrix,
    /// Coefficient of determination per output column, on the fitting data.
    pub r2: Vec<f64>,
    /// Ridge added to the normal equations, zero when none was needed.
    pub ridge: f64,
}

/// Pivots below this fraction of the mean diagonal mark `XᵀX` as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Solves `min ‖XB − Y‖_F` through the normal equations.
///
/// When `XᵀX` is numerically singular and `ridge_fallback` is set, retries
/// with `λ = 1e-8 · trace(XᵀX) / d1` added to the diagonal.
pub fn least_squares(x: &DenseMatrix, y: &DenseMatrix, ridge_fallback: bool) -> Result<LeastSquaresFit> {
    let (n, d1) = x.shape();
    if y.rows() != n {
        return Err(shape_err(
            "least_squares",
            format!("X has {n} rows, Y has {}", y.rows()),
        ));
    }
    if n < d1 {
        return Err(Error::Contract(format!(
            "least squares needs n >= d1, got n={n}, d1={d1}"
        )));
    }
    let gram = x.matmul_tn(x)?;
    let rhs = x.matmul_tn(y)?;
    let (coef, ridge) = match cholesky_solve(&gram, &rhs) {
        Ok(c) => (c, 0.0),
        Err(e) if !ridge_fallback => return Err(e),
        Err(_) => {
            let lambda = 1e-8 * gram.trace() / d1 as f64;
            let mut reg = gram.clone();
            for i in 0..d1 {
                reg[(i, i)] += lambda;
            }
            (cholesky_solve(&reg, &rhs)?, lambda)
        }
    };
    let pred = x.matmul(&coef)?;
    let r2 = r_squared(y, &pred);
    Ok(LeastSquaresFit { coef, r2, ridge })
}

/// `1 − SS_res / SS_tot` per column. A constant column scores 1 when fitted
/// exactly and −∞ otherwise.
pub fn r_squared(actual: &DenseMatrix, predicted: &DenseMatrix) -> Vec<f64> {
    let n = actual.rows() as f64;
    (0..actual.cols())
        .map(|c| {
            let mean = (0..actual.rows()).map(|r| actual[(r, c)]).sum::<f64>() / n;
            let mut ss_res = 0.0;
            let mut ss_tot = 0.0;
            for r in 0..actual.rows() {
                ss_res += (actual[(r, c)] - predicted[(r, c)]).powi(2);
                ss_tot += (actual[(r, c)] - mean).powi(2);
            }
            if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else if ss_res < 1e-24 {
                1.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(shape_err(
            "cholesky_solve",
            format!("{:?} \\ {:?}", a.shape(), b.shape()),
        ));
    }
    let scale = (a.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOL * scale) {
            return Err(Error::Singular(format!(
                "pivot {j} is {d:e} (scale {scale:e})"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves a general square system with partial pivoting.
pub fn lu_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(shape_err("lu_solve", format!("{:?} \\ {:?}", a.shape(), b.shape())));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = m.as_slice().iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .expect("nonempty range");
        if m[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::Singular(format!("no pivot in column {col}")));
        }
        if piv != col {
            for c in 0..n {
                let t = m[(col, c)];
                m[(col, c)] = m[(piv, c)];
                m[(piv, c)] = t;
            }
            for c in 0..x.cols() {
                let t = x[(col, c)];
                x[(col, c)] = x[(piv, c)];
                x[(piv, c)] = t;
            }
        }
        for r in (col + 1)..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[(r, c)] -= f * m[(col, c)];
            }
            for c in 0..x.cols() {
                x[(r, c)] -= f * x[(col, c)];
            }
        }
    }
    for c in 0..x.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= m[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / m[(i, i)];
        }
    }
    Ok(x)
}

/// Scale-normalised semi-orthogonality deviation of a `d2 × d1` map:
/// `‖AAᵀ/s − I‖_F / √d2` with `s = trace(AAᵀ)/d2`.
pub fn gram_deviation(a: &DenseMatrix) -> Result<f64> {
    let (d2, d1) = a.shape();
    if d2 > d1 {
        return Err(Error::Contract(format!(
            "gram deviation needs d2 <= d1, got {d2}x{d1}"
        )));
    }
    let gram = a.matmul_nt(a)?;
    let s = gram.trace() / d2 as f64;
    if !(s > 0.0) {
        return Err(Error::Degenerate("zero map has no gram scale".into()));
    }
    let mut acc = 0.0;
    for i in 0..d2 {
        for j in 0..d2 {
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (gram[(i, j)] / s - target).powi(2);
        }
    }
    Ok(acc.sqrt() / (d2 as f64).sqrt())
}

/// Orthonormalises the rows of `m` by modified Gram–Schmidt.
pub fn orthonormalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for j in 0..i {
            let proj: f64 = (0..out.cols()).map(|c| out[(i, c)] * out[(j, c)]).sum();
            for c in 0..out.cols() {
                let v = out[(j, c)];
                out[(i, c)] -= proj * v;
            }
        }
        let n = crate::numerics::matrix::norm(out.row(i));
        if n < 1e-12 {
            return Err(Error::Singular(format!("row {i} is linearly dependent")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::Lcg;

    /// Independent solver: modified Gram–Schmidt QR, then `R B = Qᵀ Y`.
    fn qr_oracle(x: &DenseMatrix, y: &DenseMatrix) -> DenseMatrix {
        let (n, d) = x.shape();
        let mut q = x.clone();
        let mut r = DenseMatrix::zeros(d, d);
        for j in 0..d {
            for k in 0..j {
                let p: f64 = (0..n).map(|i| q[(i, k)] * q[(i, j)]).sum();
                r[(k, j)] = p;
                for i in 0..n {
                    let v = q[(i, k)];
                    q[(i, j)] -= p * v;
                }
            }
            let nn: f64 = (0..n).map(|i| q[(i, j)].powi(2)).sum::<f64>().sqrt();
            r[(j, j)] = nn;
            for i in 0..n {
                q[(i, j)] /= nn;
            }
        }
        let qty = q.matmul_tn(y).unwrap();
        let mut b = DenseMatrix::zeros(d, y.cols());
        for c in 0..y.cols() {
            for i in (0..d).rev() {
                let mut s = qty[(i, c)];
                for k in (i + 1)..d {
                    s -= r[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / r[(i, i)];
            }
        }
        b
    }

    #[test]
    fn identity_target() {
        let mut rng = Lcg::new(1);
        let x = rng.matrix(40, 5);
        let fit = least_squares(&x, &x, false).unwrap();
        assert!(fit.coef.max_abs_diff(&DenseMatrix::identity(5)) < 1e-10);
        assert!(fit.r2.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = Lcg::new(2);
        let x = rng.matrix(60, 6);
        let b0 = rng.matrix(6, 4);
        let y = x.matmul(&b0).unwrap();
        let fit = least_squares(&x, &y, false).unwrap();
        assert!(fit.coef.max_abs_diff(&b0) < 1e-8);
    }

    #[test]
    fn noisy_matches_qr_oracle() {
        let mut rng = Lcg::new(3);
        let x = rng.matrix(80, 7);
        let b0 = rng.matrix(7, 3);
        let noise = rng.matrix(80, 3).scale(0.1);
        let y = x.matmul(&b0).unwrap().add(&noise).unwrap();
        let fit = least_squares(&x, &y, false).unwrap();
        assert!(fit.coef.max_abs_diff(&qr_oracle(&x, &y)) < 1e-6);
    }

    #[test]
    fn rank_deficient() {
        let mut rng = Lcg::new(4);
        let base = rng.matrix(30, 2);
        let x = DenseMatrix::from_fn(30, 3, |r, c| if c < 2 { base[(r, c)] } else { base[(r, 0)] });
        assert!(matches!(least_squares(&x, &base, false), Err(Error::Singular(_))));
        let fit = least_squares(&x, &base, true).unwrap();
        assert!(fit.ridge > 0.0);
        assert!(fit.r2.iter().all(|r| *r > 0.999_999));
    }

    #[test]
    fn gram_deviation_cases() {
        let mut rng = Lcg::new(5);
        let q = orthonormalize_rows(&rng.matrix(4, 7)).unwrap();
        assert!(gram_deviation(&q).unwrap() < 1e-12);
        assert!(gram_deviation(&q.scale(2.0)).unwrap() < 1e-12);

        let a = rng.matrix(8, 10);
        let dev = gram_deviation(&a).unwrap();
        // direct recomputation
        let g = a.matmul(&a.transpose()).unwrap();
        let s = (0..8).map(|i| g[(i, i)]).sum::<f64>() / 8.0;
        let mut acc = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let e = g[(i, j)] / s - if i == j { 1.0 } else { 0.0 };
                acc += e * e;
            }
        }
        assert!(dev > 0.0);
        assert!((dev - (acc / 8.0).sqrt()).abs() < 1e-12);
        assert!(matches!(gram_deviation(&rng.matrix(5, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn lu_matches_cholesky_on_spd() {
        let mut rng = Lcg::new(6);
        let m = rng.matrix(5, 5);
        let spd = m.matmul_tn(&m).unwrap().add(&DenseMatrix::identity(5)).unwrap();
        let b = rng.matrix(5, 2);
        let x1 = lu_solve(&spd, &b).unwrap();
        let x2 = cholesky_solve(&spd, &b).unwrap();
        assert!(x1.max_abs_diff(&x2) < 1e-10);
    }
}
