//! Central finite-difference verification of recorded gradients.

use crate::error::Result;
use crate::numerics::graph::{CompGraph, NodeId};
use crate::numerics::matrix::DenseMatrix;

/// Compares the reverse-mode gradient of `build` with respect to its input
/// leaf against central differences with step `h`.
///
/// `build` receives a fresh graph and the parameter leaf holding `x` and must
/// return a scalar node. Returns `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-8)`.
pub fn check_gradient<F>(x: &DenseMatrix, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut CompGraph, NodeId) -> Result<NodeId>,
{
    let eval = |v: &DenseMatrix| -> Result<f64> {
        let mut g = CompGraph::new();
        let p = g.param(v.clone());
        let l = build(&mut g, p)?;
        Ok(g.scalar(l))
    };

    let mut g = CompGraph::new();
    let p = g.param(x.clone());
    let l = build(&mut g, p)?;
    let analytic = g.backward(l)?.wrt(p);

    let mut numeric = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;
        numeric.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let diff = a.sub(b).expect("relative_error shapes").frobenius_norm();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(1e-8)
}

/// Small deterministic generator for tests and oracles; independent of the
/// library's sampling streams.
#[derive(Debug, Clone)]
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed ^ 0x9E37_79B9_7F4A_7C15)
    }

    /// Uniform on [−1, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| self.next_f64())
    }

    pub fn unit_rows(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        self.matrix(rows, cols)
            .row_normalize()
            .expect("random rows are nonzero")
    }
}
