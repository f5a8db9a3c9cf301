//! The five objectives, recorded on a [`CompGraph`] so they can be trained,
//! plus value-level wrappers for evaluation and testing.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{CompGraph, DenseMatrix, NodeId};
use crate::ssl::MocoQueue;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("temperature must be positive, got {tau}")))
    }
}

/// InfoNCE over `2B` interleaved rows: rows `2i` and `2i+1` are positives,
/// every other row in the batch is a negative.
pub fn simclr_node(g: &mut CompGraph, reps: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let n = g.value(reps).rows();
    if n % 2 != 0 {
        return Err(shape_err("simclr", format!("{n} rows cannot form interleaved pairs")));
    }
    if n < 4 {
        return Err(Error::Contract("simclr needs at least 2 pairs to have negatives".into()));
    }
    let t = g.transpose(reps);
    let sim = g.matmul(reps, t)?;
    let logits = g.scale(sim, 1.0 / tau);
    let targets = (0..n).map(|i| i ^ 1).collect();
    let exclude = (0..n).collect();
    g.softmax_xent(logits, targets, Some(exclude))
}

/// InfoNCE with one positive key per query and the queue as negatives.
pub fn moco_node(g: &mut CompGraph, q: NodeId, keys: &DenseMatrix, queue: &MocoQueue, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    if !queue.is_full() {
        return Err(Error::WarmUp {
            filled: queue.len(),
            capacity: queue.capacity(),
        });
    }
    let k = g.constant(keys.clone());
    let pos = g.row_dot(q, k)?;
    let bank = g.constant(queue.matrix().transpose());
    let neg = g.matmul(q, bank)?;
    let all = g.concat_cols(pos, neg)?;
    let logits = g.scale(all, 1.0 / tau);
    let n = g.value(q).rows();
    g.softmax_xent(logits, vec![0; n], None)
}

/// Mean over rows of `‖p − t‖²`.
fn mean_sq_dist(g: &mut CompGraph, p: NodeId, t: NodeId) -> Result<NodeId> {
    let n = g.value(p).rows();
    let d = g.sub(p, t)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Symmetric BYOL regression of normalized predictions onto fixed targets.
pub fn byol_node(g: &mut CompGraph, p1: NodeId, p2: NodeId, t1: &DenseMatrix, t2: &DenseMatrix) -> Result<NodeId> {
    let t1 = g.constant(t1.clone());
    let t2 = g.constant(t2.clone());
    let a = mean_sq_dist(g, p1, t2)?;
    let b = mean_sq_dist(g, p2, t1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Symmetric negative cosine; `z1`, `z2` are cut from the gradient here.
pub fn simsiam_node(g: &mut CompGraph, p1: NodeId, p2: NodeId, z1: NodeId, z2: NodeId) -> Result<NodeId> {
    let z1 = g.detach(z1);
    let z2 = g.detach(z2);
    let c1 = g.row_dot(p1, z2)?;
    let c2 = g.row_dot(p2, z1)?;
    let m1 = g.mean(c1);
    let m2 = g.mean(c2);
    let s = g.add(m1, m2)?;
    Ok(g.scale(s, -0.5))
}

/// Cross-correlation of batch-standardized columns fed to the redundancy penalty.
pub fn barlow_node(g: &mut CompGraph, r1: NodeId, r2: NodeId, lambda: f64) -> Result<NodeId> {
    if !(lambda > 0.0) {
        return Err(Error::Contract(format!("barlow lambda must be positive, got {lambda}")));
    }
    let n = g.value(r1).rows();
    let z1 = g.batch_standardize(r1)?;
    let z2 = g.batch_standardize(r2)?;
    let t = g.transpose(z1);
    let c = g.matmul(t, z2)?;
    let c = g.scale(c, 1.0 / n as f64);
    g.barlow_penalty(c, lambda)
}

pub fn loss_simclr(reps: &DenseMatrix, tau: f64) -> Result<f64> {
    let mut g = CompGraph::new();
    let r = g.constant(reps.clone());
    let l = simclr_node(&mut g, r, tau)?;
    Ok(g.scalar(l))
}

pub fn loss_moco(q: &DenseMatrix, keys: &DenseMatrix, queue: &MocoQueue, tau: f64) -> Result<f64> {
    let mut g = CompGraph::new();
    let qn = g.constant(q.clone());
    let l = moco_node(&mut g, qn, keys, queue, tau)?;
    Ok(g.scalar(l))
}

pub fn loss_byol(p1: &DenseMatrix, p2: &DenseMatrix, t1: &DenseMatrix, t2: &DenseMatrix) -> Result<f64> {
    let mut g = CompGraph::new();
    let a = g.constant(p1.clone());
    let b = g.constant(p2.clone());
    let l = byol_node(&mut g, a, b, t1, t2)?;
    Ok(g.scalar(l))
}

pub fn loss_simsiam(p1: &DenseMatrix, p2: &DenseMatrix, z1: &DenseMatrix, z2: &DenseMatrix) -> Result<f64> {
    let mut g = CompGraph::new();
    let ids = [p1, p2, z1, z2].map(|m| g.constant(m.clone()));
    let l = simsiam_node(&mut g, ids[0], ids[1], ids[2], ids[3])?;
    Ok(g.scalar(l))
}

pub fn loss_barlow(r1: &DenseMatrix, r2: &DenseMatrix, lambda: f64) -> Result<f64> {
    let mut g = CompGraph::new();
    let a = g.constant(r1.clone());
    let b = g.constant(r2.clone());
    let l = barlow_node(&mut g, a, b, lambda)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::Lcg;

    #[test]
    fn simclr_identical_batch_is_log3() {
        let reps = DenseMatrix::filled(4, 3, 1.0 / 3f64.sqrt());
        assert!((loss_simclr(&reps, 0.5).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn simclr_hand_value() {
        // pair 0: e1,e1; pair 1: e2,e2; cross similarities are 0
        let reps = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let e = 1f64.exp();
        let expected = -(e / (e + 2.0)).ln();
        assert!((loss_simclr(&reps, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn simclr_rejects_small_batches() {
        let reps = DenseMatrix::filled(2, 2, 0.5f64.sqrt());
        assert!(loss_simclr(&reps, 0.1).is_err());
        assert!(loss_simclr(&DenseMatrix::filled(5, 2, 0.5f64.sqrt()), 0.1).is_err());
    }

    #[test]
    fn moco_hand_value() {
        let k = 6;
        let mut queue = MocoQueue::new(k, k + 1).unwrap();
        let q = DenseMatrix::from_fn(1, k + 1, |_, c| f64::from(c == 0));
        assert!(matches!(loss_moco(&q, &q, &queue, 1.0), Err(Error::WarmUp { .. })));
        queue
            .enqueue(&DenseMatrix::from_fn(k, k + 1, |r, c| f64::from(c == r + 1)))
            .unwrap();
        let e = 1f64.exp();
        let expected = -(e / (e + k as f64)).ln();
        assert!((loss_moco(&q, &q, &queue, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn byol_and_simsiam_minima() {
        let z = Lcg::new(1).unit_rows(5, 4);
        assert!(loss_byol(&z, &z, &z, &z).unwrap().abs() < 1e-15);
        assert!((loss_simsiam(&z, &z, &z, &z).unwrap() + 1.0).abs() < 1e-12);
        let neg = z.scale(-1.0);
        assert!((loss_simsiam(&z, &z, &neg, &neg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simsiam_detached_branch_gets_no_gradient() {
        let mut rng = Lcg::new(2);
        let p = rng.unit_rows(4, 3);
        let mut g = CompGraph::new();
        let p1 = g.param(p.clone());
        let p2 = g.param(p.clone());
        let z1 = g.param(rng.unit_rows(4, 3));
        let z2 = g.param(rng.unit_rows(4, 3));
        let l = simsiam_node(&mut g, p1, p2, z1, z2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(!grads.touched(z1) && !grads.touched(z2));
        assert!(grads.touched(p1));
    }

    #[test]
    fn barlow_identity_correlation_is_zero() {
        // columns orthogonal with zero mean and unit population variance
        let r = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]).unwrap();
        assert!(loss_barlow(&r, &r, 0.005).unwrap().abs() < 1e-15);
        let flat = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(loss_barlow(&flat, &flat, 0.005), Err(Error::Degenerate(_))));
    }
}
