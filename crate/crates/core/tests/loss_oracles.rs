//! Each objective against a plain-loop implementation, plus the identities
//! the objectives are built on.

use shiftlab_core::numerics::gradcheck::Lcg;
use shiftlab_core::numerics::{dot, DenseMatrix};
use shiftlab_core::ssl::{
    loss_barlow, loss_byol, loss_moco, loss_simclr, loss_simsiam, simclr_decomposition_gap, sphere_identity_residual,
    MocoQueue,
};

const TOL: f64 = 1e-10;

fn naive_simclr(r: &DenseMatrix, tau: f64) -> f64 {
    let n = r.rows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (dot(r.row(i), r.row(i ^ 1)) / tau).exp();
        let mut den = 0.0;
        for j in 0..n {
            if j != i {
                den += (dot(r.row(i), r.row(j)) / tau).exp();
            }
        }
        total -= (pos / den).ln();
    }
    total / n as f64
}

fn naive_moco(q: &DenseMatrix, k: &DenseMatrix, bank: &DenseMatrix, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.rows() {
        let pos = (dot(q.row(i), k.row(i)) / tau).exp();
        let mut den = pos;
        for j in 0..bank.rows() {
            den += (dot(q.row(i), bank.row(j)) / tau).exp();
        }
        total -= (pos / den).ln();
    }
    total / q.rows() as f64
}

fn mean_row_sq(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            s += (a[(i, j)] - b[(i, j)]).powi(2);
        }
    }
    s / a.rows() as f64
}

fn mean_row_dot(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    (0..a.rows()).map(|i| dot(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64
}

fn standardize(x: &DenseMatrix) -> DenseMatrix {
    let (n, d) = x.shape();
    let mut out = x.clone();
    for c in 0..d {
        let m: f64 = (0..n).map(|r| x[(r, c)]).sum::<f64>() / n as f64;
        let sd = ((0..n).map(|r| (x[(r, c)] - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        for r in 0..n {
            out[(r, c)] = (x[(r, c)] - m) / sd;
        }
    }
    out
}

fn naive_barlow(r1: &DenseMatrix, r2: &DenseMatrix, lambda: f64) -> f64 {
    let (z1, z2) = (standardize(r1), standardize(r2));
    let (n, d) = r1.shape();
    let mut total = 0.0;
    for a in 0..d {
        for b in 0..d {
            let c: f64 = (0..n).map(|i| z1[(i, a)] * z2[(i, b)]).sum::<f64>() / n as f64;
            total += if a == b { (1.0 - c).powi(2) } else { lambda * c * c };
        }
    }
    total
}

#[test]
fn simclr_matches_loops() {
    for s in 0..10 {
        let r = Lcg::new(s).unit_rows(2 * (2 + s as usize), 6);
        for tau in [0.07, 0.5, 1.0] {
            let got = loss_simclr(&r, tau).unwrap();
            assert!((got - naive_simclr(&r, tau)).abs() < TOL, "seed {s} tau {tau}");
        }
    }
}

#[test]
fn simclr_identical_pairs_is_log3() {
    let v = [0.6, 0.8];
    let r = DenseMatrix::from_rows(&[v, v, v, v]).unwrap();
    for tau in [0.07, 1.0, 5.0] {
        assert!((loss_simclr(&r, tau).unwrap() - 3f64.ln()).abs() <= 1e-10);
    }
}

#[test]
fn moco_matches_loops() {
    for s in 0..10 {
        let mut lcg = Lcg::new(20 + s);
        let (b, d, k) = (4, 5, 9);
        let mut queue = MocoQueue::new(k, d).unwrap();
        queue.enqueue(&lcg.unit_rows(k, d)).unwrap();
        let q = lcg.unit_rows(b, d);
        let keys = lcg.unit_rows(b, d);
        let got = loss_moco(&q, &keys, &queue, 0.2).unwrap();
        assert!((got - naive_moco(&q, &keys, &queue.matrix(), 0.2)).abs() < TOL);
    }
}

#[test]
fn byol_and_simsiam_match_loops() {
    for s in 0..10 {
        let mut lcg = Lcg::new(40 + s);
        let [p1, p2, t1, t2] = [0; 4].map(|_| lcg.unit_rows(6, 5));
        let byol = loss_byol(&p1, &p2, &t1, &t2).unwrap();
        assert!((byol - 0.5 * (mean_row_sq(&p1, &t2) + mean_row_sq(&p2, &t1))).abs() < TOL);
        let sim = loss_simsiam(&p1, &p2, &t1, &t2).unwrap();
        assert!((sim + 0.5 * (mean_row_dot(&p1, &t2) + mean_row_dot(&p2, &t1))).abs() < TOL);
    }
}

#[test]
fn barlow_matches_loops() {
    for s in 0..10 {
        let mut lcg = Lcg::new(60 + s);
        let (r1, r2) = (lcg.matrix(12, 4), lcg.matrix(12, 4));
        for lambda in [0.005, 0.5] {
            let got = loss_barlow(&r1, &r2, lambda).unwrap();
            assert!((got - naive_barlow(&r1, &r2, lambda)).abs() < TOL);
        }
    }
}

#[test]
fn sphere_distance_identity() {
    let mut lcg = Lcg::new(80);
    let u = lcg.unit_rows(1000, 7);
    let v = lcg.unit_rows(1000, 7);
    let worst = (0..1000)
        .map(|i| sphere_identity_residual(u.row(i), v.row(i)).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn decomposition_gap_shrinks_with_batch() {
    // random anchors, each partnered with a perturbed copy of itself
    let mut lcg = Lcg::new(90);
    let anchors = lcg.unit_rows(256, 16);
    let partners = anchors.add(&lcg.matrix(256, 16).scale(0.3)).unwrap().row_normalize().unwrap();
    let reps = DenseMatrix::interleave_rows(&anchors, &partners).unwrap();
    let gaps: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&b| {
            let idx: Vec<usize> = (0..2 * b).collect();
            simclr_decomposition_gap(&reps.select_rows(&idx), 0.5).unwrap()
        })
        .collect();
    println!("decomposition gap for B = 64, 128, 256: {gaps:?}");
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}
