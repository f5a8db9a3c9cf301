//! Seeded random streams and the samplers the generative process needs.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm};

/// Reproducible random source identified by `(seed, stream_id)`.
///
/// Backed by the ChaCha20 counter-mode generator, whose 64-bit stream
/// selector gives disjoint sequences for the same key. [`RandomStream::fork`]
/// derives children purely from identifiers, never from consumed state.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream `i`; independent of how much of `self` was consumed.
    pub fn fork(&self, i: u64) -> Self {
        let child = splitmix64(splitmix64(self.stream_id) ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self::new(self.seed, child)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Uniform draw on the unit sphere `S^{d−1}`.
pub fn sample_sphere_uniform(d: usize, rs: &mut RandomStream) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::Contract(format!("sphere dimension must be >= 2, got {d}")));
    }
    loop {
        let v: Vec<f64> = (0..d).map(|_| rs.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return Ok(v.into_iter().map(|x| x / n).collect());
        }
    }
}

/// Mean direction and concentration of a von Mises–Fisher distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::Contract("vMF needs dimension >= 2".into()));
        }
        if (norm(&mu) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("vMF mean direction has norm {}", norm(&mu))));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::Contract(format!("vMF concentration {kappa} invalid")));
        }
        Ok(Self { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// Draw from vMF(μ, κ) by Wood's rejection scheme: sample the cosine `w`
/// to μ, then a uniform direction in the tangent space of μ.
pub fn sample_vmf(p: &VmfParams, rs: &mut RandomStream) -> Vec<f64> {
    let d = p.mu.len();
    let dm1 = (d - 1) as f64;
    let kappa = p.kappa;
    // b = (−2κ + √(4κ² + (d−1)²)) / (d−1), written to avoid cancellation
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("positive shape");

    let w = loop {
        let z: f64 = beta.sample(rs);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rs.uniform(0.0, 1.0);
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w.clamp(-1.0, 1.0);
        }
    };

    let tangent = loop {
        let mut v: Vec<f64> = (0..d).map(|_| rs.normal()).collect();
        let proj = dot(&v, &p.mu);
        v.iter_mut().zip(&p.mu).for_each(|(x, m)| *x -= proj * m);
        let n = norm(&v);
        if n > 1e-12 {
            break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let out: Vec<f64> = p.mu.iter().zip(&tangent).map(|(m, t)| w * m + s * t).collect();
    let n = norm(&out);
    out.into_iter().map(|x| x / n).collect()
}

/// Draw from N(μ, σ²) conditioned on `[lo, hi]`.
///
/// Plain rejection while the interval carries at least 1% of the mass,
/// inverse-CDF sampling otherwise.
pub fn sample_truncnorm(mu: f64, sigma: f64, lo: f64, hi: f64, rs: &mut RandomStream) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::Contract(format!("empty interval [{lo}, {hi}]")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let a = (lo - mu) / sigma;
    let bnd = (hi - mu) / sigma;
    // Work on the side of the mean where the CDF keeps precision.
    let flip = a > 0.0;
    let (a, bnd) = if flip { (-bnd, -a) } else { (a, bnd) };
    let (pa, pb) = (std.cdf(a), std.cdf(bnd));
    let mass = pb - pa;

    let z = if mass >= 0.01 {
        loop {
            let z = rs.normal();
            if z >= a && z <= bnd {
                break z;
            }
        }
    } else if mass > 0.0 {
        let u = rs.uniform(pa, pb);
        std.inverse_cdf(u).clamp(a, bnd)
    } else {
        // Far tail with no representable mass: uniform inside the interval.
        rs.uniform(a, bnd)
    };
    let z = if flip { -z } else { z };
    Ok((mu + sigma * z).clamp(lo, hi))
}
