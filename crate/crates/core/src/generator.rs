//! Injective mixing `x = g(z)` from embedded latents to observations.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, lu_solve, norm, orthonormalize_rows, DenseMatrix};
use crate::sampling::{sample_sphere_uniform, RandomStream};
use crate::scm::{Geometry, LatentPoint, NUM_VARS};

/// Stream reserved for anchors and layer matrices.
const GENERATOR_STREAM: u64 = 0x6E4E_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Identity,
    OrthogonalLinear,
    InvertibleMlp,
}

/// Construction parameters for [`GeneratorSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub geometry: Geometry,
    pub num_classes: usize,
    /// Width of the class anchor block; 0 leaves the class out of the latent.
    pub class_embed_dim: usize,
    /// Length of each anchor inside the embedded latent.
    pub anchor_scale: f64,
    pub depth: usize,
    pub leaky_slope: f64,
    pub condition_cap: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::InvertibleMlp,
            geometry: Geometry::Box,
            num_classes: 7,
            class_embed_dim: 8,
            anchor_scale: 1.0,
            depth: 3,
            leaky_slope: 0.2,
            condition_cap: 10.0,
        }
    }
}

/// Built mixing function: anchors and square layer matrices, all persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub config: GeneratorConfig,
    pub seed: u64,
    /// `num_classes` unit vectors of length `class_embed_dim`.
    pub anchors: Vec<Vec<f64>>,
    /// Applied as `h ← M h`, leaky activation between layers.
    pub layers: Vec<DenseMatrix>,
}

impl GeneratorSpec {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("generator needs at least one class".into()));
        }
        if config.class_embed_dim == 1 && config.num_classes > 2 {
            return Err(Error::Config("a 1-d class embedding cannot separate more than 2 anchors".into()));
        }
        if !(config.condition_cap >= 1.0) {
            return Err(Error::Config("condition cap must be >= 1".into()));
        }
        if !(config.leaky_slope > 0.0 && config.leaky_slope <= 1.0) {
            return Err(Error::Config("leaky slope must be in (0, 1]".into()));
        }
        let rs = RandomStream::new(seed, GENERATOR_STREAM);
        let anchors = draw_anchors(&config, &mut rs.fork(0))?;
        let d1 = config.class_embed_dim + NUM_VARS;
        let mut layer_rs = rs.fork(1);
        let layers = match config.kind {
            GeneratorKind::Identity => Vec::new(),
            GeneratorKind::OrthogonalLinear => vec![random_orthogonal(d1, &mut layer_rs)?],
            GeneratorKind::InvertibleMlp => {
                if config.depth == 0 {
                    return Err(Error::Config("mlp generator depth must be positive".into()));
                }
                (0..config.depth)
                    .map(|_| conditioned_matrix(d1, config.condition_cap, &mut layer_rs))
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            config,
            seed,
            anchors,
            layers,
        })
    }

    /// Dimension of embedded latents and of observations.
    pub fn dim(&self) -> usize {
        self.config.class_embed_dim + NUM_VARS
    }

    /// `(anchor(c)·scale, V)`, projected onto the unit sphere in sphere geometry.
    pub fn embed_latent(&self, z: &LatentPoint) -> Result<Vec<f64>> {
        if z.class_id >= self.config.num_classes {
            return Err(Error::Contract(format!(
                "class {} unknown to a generator with {} classes",
                z.class_id, self.config.num_classes
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        if self.config.class_embed_dim > 0 {
            out.extend(self.anchors[z.class_id].iter().map(|a| a * self.config.anchor_scale));
        }
        out.extend_from_slice(&z.vars);
        if self.config.geometry == Geometry::Sphere {
            let n = norm(&out);
            if n == 0.0 {
                return Err(Error::Degenerate("zero latent cannot be projected to the sphere".into()));
            }
            out.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }

    pub fn embed_batch(&self, zs: &[LatentPoint]) -> Result<DenseMatrix> {
        let rows = zs.iter().map(|z| self.embed_latent(z)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(DenseMatrix::zeros(0, self.dim()));
        }
        DenseMatrix::from_rows(&rows)
    }

    pub fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        let m = DenseMatrix::row_vector(z);
        Ok(self.generate_batch(&m)?.into_vec())
    }

    /// Row-wise `g` over a batch of embedded latents.
    pub fn generate_batch(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        if z.cols() != self.dim() {
            return Err(shape_err(
                "generate",
                format!("latent width {} but generator expects {}", z.cols(), self.dim()),
            ));
        }
        let mut h = z.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, m) in self.layers.iter().enumerate() {
            h = h.matmul_nt(m)?;
            if self.config.kind == GeneratorKind::InvertibleMlp && i < last {
                let s = self.config.leaky_slope;
                h = h.map(|v| if v > 0.0 { v } else { s * v });
            }
        }
        Ok(h)
    }

    /// Layer-by-layer inverse: undo the activation, then solve the linear map.
    pub fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(shape_err("invert", format!("{} vs {}", x.len(), self.dim())));
        }
        let mut h = DenseMatrix::from_vec(x.len(), 1, x.to_vec())?;
        let last = self.layers.len().saturating_sub(1);
        for (i, m) in self.layers.iter().enumerate().rev() {
            if self.config.kind == GeneratorKind::InvertibleMlp && i < last {
                let s = self.config.leaky_slope;
                h = h.map(|v| if v > 0.0 { v } else { v / s });
            }
            h = lu_solve(m, &h)?;
        }
        Ok(h.into_vec())
    }
}

fn draw_anchors(config: &GeneratorConfig, rs: &mut RandomStream) -> Result<Vec<Vec<f64>>> {
    let d = config.class_embed_dim;
    if d == 0 {
        return Ok(vec![Vec::new(); config.num_classes]);
    }
    if d == 1 {
        return Ok([vec![1.0], vec![-1.0]].into_iter().take(config.num_classes).collect());
    }
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
    for c in 0..config.num_classes {
        let mut tries = 0;
        loop {
            let cand = sample_sphere_uniform(d, rs)?;
            if anchors.iter().all(|a| dot(a, &cand) < 0.5) {
                anchors.push(cand);
                break;
            }
            tries += 1;
            if tries > 100_000 {
                return Err(Error::Config(format!(
                    "could not place anchor {c} with pairwise cosine < 0.5 in {d} dimensions"
                )));
            }
        }
    }
    Ok(anchors)
}

fn random_orthogonal(d: usize, rs: &mut RandomStream) -> Result<DenseMatrix> {
    loop {
        let g = DenseMatrix::from_fn(d, d, |_, _| rs.normal());
        if let Ok(q) = orthonormalize_rows(&g) {
            return Ok(q);
        }
    }
}

/// `U diag(s) Vᵀ` with log-uniform singular values in `[1/√cap, √cap]`.
fn conditioned_matrix(d: usize, cap: f64, rs: &mut RandomStream) -> Result<DenseMatrix> {
    let u = random_orthogonal(d, rs)?;
    let v = random_orthogonal(d, rs)?;
    let half = cap.sqrt().ln();
    let s: Vec<f64> = (0..d).map(|_| rs.uniform(-half, half).exp()).collect();
    let us = DenseMatrix::from_fn(d, d, |r, c| u[(r, c)] * s[c]);
    us.matmul(&v)
}

/// `σ_max / σ_min` by power iteration on `MᵀM` and on its inverse.
pub fn condition_number(m: &DenseMatrix) -> Result<f64> {
    let d = m.rows();
    let gram = m.matmul_tn(m)?;
    let mut x = DenseMatrix::filled(d, 1, 1.0);
    let mut hi = 0.0;
    for _ in 0..500 {
        let y = gram.matmul(&x)?;
        hi = y.frobenius_norm() / x.frobenius_norm();
        x = y.scale(1.0 / y.frobenius_norm());
    }
    let mut x = DenseMatrix::filled(d, 1, 1.0);
    let mut lo_inv = 0.0;
    for _ in 0..500 {
        let y = lu_solve(&gram, &x)?;
        lo_inv = y.frobenius_norm() / x.frobenius_norm();
        x = y.scale(1.0 / y.frobenius_norm());
    }
    Ok((hi * lo_inv).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub pairs: usize,
    /// Smallest `‖g(a) − g(b)‖ / ‖a − b‖` over the sampled pairs.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub min_output_distance: f64,
    pub collisions: usize,
    pub passed: bool,
}

/// Scans `n` random latent pairs for collapsed outputs.
pub fn injectivity_check(spec: &GeneratorSpec, n: usize, rs: &mut RandomStream) -> Result<InjectivityReport> {
    if n < 2 {
        return Err(Error::Contract("injectivity check needs at least 2 pairs".into()));
    }
    let d = spec.dim();
    let draw = |rs: &mut RandomStream| -> Result<Vec<f64>> {
        match spec.config.geometry {
            Geometry::Sphere => sample_sphere_uniform(d, rs),
            Geometry::Box => Ok((0..d).map(|_| rs.uniform(-1.0, 1.0)).collect()),
        }
    };
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    let mut min_out = f64::INFINITY;
    let mut collisions = 0;
    for _ in 0..n {
        let a = draw(rs)?;
        let b = draw(rs)?;
        let din: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if din == 0.0 {
            continue;
        }
        let ga = spec.generate(&a)?;
        let gb = spec.generate(&b)?;
        let dout: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if dout < 1e-9 {
            collisions += 1;
        }
        min_out = min_out.min(dout);
        min_ratio = min_ratio.min(dout / din);
        max_ratio = max_ratio.max(dout / din);
    }
    Ok(InjectivityReport {
        pairs: n,
        min_ratio,
        max_ratio,
        min_output_distance: min_out,
        collisions,
        passed: collisions == 0 && min_ratio > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GeneratorKind, geometry: Geometry) -> GeneratorSpec {
        GeneratorSpec::new(
            GeneratorConfig {
                kind,
                geometry,
                ..GeneratorConfig::default()
            },
            11,
        )
        .unwrap()
    }

    fn latent(class_id: usize, x: f64) -> LatentPoint {
        LatentPoint {
            class_id,
            vars: [x, 0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.2, 0.1, -0.1],
            geometry: Geometry::Box,
        }
    }

    #[test]
    fn anchors_are_spread() {
        let s = spec(GeneratorKind::Identity, Geometry::Box);
        for i in 0..s.anchors.len() {
            assert!((norm(&s.anchors[i]) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&s.anchors[i], &s.anchors[j]) < 0.5);
            }
        }
    }

    #[test]
    fn embedding_properties() {
        let s = spec(GeneratorKind::Identity, Geometry::Box);
        assert_eq!(s.embed_latent(&latent(2, 0.3)).unwrap(), s.embed_latent(&latent(2, 0.3)).unwrap());
        assert_ne!(s.embed_latent(&latent(2, 0.3)).unwrap(), s.embed_latent(&latent(3, 0.3)).unwrap());
        assert!(s.embed_latent(&latent(9, 0.3)).is_err());
        let sph = spec(GeneratorKind::Identity, Geometry::Sphere);
        let e = sph.embed_latent(&latent(1, 0.7)).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_isometry() {
        let id = spec(GeneratorKind::Identity, Geometry::Box);
        let z = id.embed_latent(&latent(0, 0.4)).unwrap();
        assert_eq!(id.generate(&z).unwrap(), z);
        let orth = spec(GeneratorKind::OrthogonalLinear, Geometry::Box);
        let w = orth.embed_latent(&latent(4, -0.6)).unwrap();
        let (gz, gw) = (orth.generate(&z).unwrap(), orth.generate(&w).unwrap());
        assert!((norm(&gz) - norm(&z)).abs() < 1e-10);
        assert!((dot(&gz, &gw) - dot(&z, &w)).abs() < 1e-10);
        assert!(orth.generate(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mlp_inverts_and_respects_cap() {
        let s = spec(GeneratorKind::InvertibleMlp, Geometry::Box);
        for m in &s.layers {
            let k = condition_number(m).unwrap();
            assert!(k <= 10.0 + 1e-6, "condition {k}");
        }
        let mut rs = RandomStream::new(5, 0);
        for _ in 0..100 {
            let z: Vec<f64> = (0..s.dim()).map(|_| rs.uniform(-1.0, 1.0)).collect();
            let x = s.generate(&z).unwrap();
            let back = s.invert(&x).unwrap();
            let err = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5);
        }
        // deterministic
        let z = vec![0.3; s.dim()];
        assert_eq!(s.generate(&z).unwrap(), s.generate(&z).unwrap());
    }

    #[test]
    fn injectivity_reports() {
        let mut rs = RandomStream::new(6, 0);
        let id = injectivity_check(&spec(GeneratorKind::Identity, Geometry::Box), 50, &mut rs).unwrap();
        assert!((id.min_ratio - 1.0).abs() < 1e-12 && id.passed);
        let orth = injectivity_check(&spec(GeneratorKind::OrthogonalLinear, Geometry::Box), 50, &mut rs).unwrap();
        assert!((orth.min_ratio - 1.0).abs() < 1e-9 && (orth.max_ratio - 1.0).abs() < 1e-9);
        let mlp = injectivity_check(&spec(GeneratorKind::InvertibleMlp, Geometry::Box), 1000, &mut rs).unwrap();
        assert!(mlp.min_ratio > 0.0 && mlp.passed);
    }

    #[test]
    fn json_checkpoint_roundtrip() {
        let s = spec(GeneratorKind::InvertibleMlp, Geometry::Box);
        let json = serde_json::to_string(&s).unwrap();
        let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}
