use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::numerics::DenseMatrix;
use crate::sampling::{sample_vmf, RandomStream, VmfParams};
use crate::scm::{do_intervene, Geometry, HoldoutRule, InterventionRange, InterventionSpec, LatentPoint, Scm};
use crate::ssl::SslModel;

/// How the second view of a positive pair is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// vMF partner of the embedded latent with concentration `kappa`.
    Vmf { kappa: f64 },
    /// Redraw the listed variables from their seen-range conditionals.
    Resample(InterventionSpec),
}

/// Hue variables and depth: the factors image augmentations perturb.
pub fn default_box_augmentation() -> InterventionSpec {
    InterventionSpec::from_names(&["hue_obj", "hue_spl", "hue_bg", "pos_z"], InterventionRange::Seen)
        .expect("augmentation variables are eligible")
}

/// Training latents together with everything needed to render pairs.
#[derive(Debug, Clone, Copy)]
pub struct PairSource<'a> {
    pub scm: &'a Scm,
    pub rule: &'a HoldoutRule,
    pub generator: &'a GeneratorSpec,
    pub latents: &'a [LatentPoint],
    pub policy: &'a AugmentPolicy,
}

impl PairSource<'_> {
    /// Embedded latents `(z, z̃)` of one positive pair.
    pub fn embedded_pair(&self, z: &LatentPoint, rs: &mut RandomStream) -> Result<(Vec<f64>, Vec<f64>)> {
        let e1 = self.generator.embed_latent(z)?;
        let e2 = match self.policy {
            AugmentPolicy::Vmf { kappa } => {
                if self.generator.config.geometry != Geometry::Sphere {
                    return Err(Error::Config("vMF augmentation needs sphere geometry".into()));
                }
                sample_vmf(&VmfParams::new(e1.clone(), *kappa)?, rs)
            }
            AugmentPolicy::Resample(iv) => {
                let z2 = do_intervene(self.scm, self.rule, z, iv, rs)?;
                self.generator.embed_latent(&z2)?
            }
        };
        Ok((e1, e2))
    }

    /// Observations of both views for the latents at `idx`.
    pub fn batch(&self, idx: &[usize], rs: &mut RandomStream) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut a = Vec::with_capacity(idx.len());
        let mut b = Vec::with_capacity(idx.len());
        for &i in idx {
            let (e1, e2) = self.embedded_pair(&self.latents[i], rs)?;
            a.push(e1);
            b.push(e2);
        }
        let x1 = self.generator.generate_batch(&DenseMatrix::from_rows(&a)?)?;
        let x2 = self.generator.generate_batch(&DenseMatrix::from_rows(&b)?)?;
        Ok((x1, x2))
    }

    /// Unit-length latent displacements `z̃ − z` produced by the policy.
    pub fn augmentation_directions(&self, n: usize, rs: &mut RandomStream) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while out.len() < n {
            let z = &self.latents[i % self.latents.len()];
            i += 1;
            let (e1, e2) = self.embedded_pair(z, rs)?;
            let d: Vec<f64> = e2.iter().zip(&e1).map(|(a, b)| a - b).collect();
            let len = crate::numerics::norm(&d);
            if len > 1e-12 {
                out.push(d.into_iter().map(|v| v / len).collect());
            }
            if i > 100 * n.max(1) && out.is_empty() {
                return Err(Error::Degenerate("augmentation never moves the latent".into()));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Absent while the MoCo queue is still filling.
    pub loss: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
}

/// One pass over a permutation of the training latents.
///
/// All randomness comes from `base.fork(epoch)`, so an epoch can be replayed
/// from a checkpoint taken at its start. The trailing partial batch is dropped.
pub fn train_epoch(
    model: &mut SslModel,
    source: &PairSource<'_>,
    epoch: usize,
    base: &RandomStream,
) -> Result<Vec<BatchRecord>> {
    let n = source.latents.len();
    let b = model.config.batch_size;
    if n < b {
        return Err(Error::Data(format!("{n} training latents cannot fill a batch of {b}")));
    }
    if source.generator.dim() != model.input_dim {
        return Err(Error::Data(format!(
            "generator emits {} dims but the encoder expects {}",
            source.generator.dim(),
            model.input_dim
        )));
    }
    let ers = base.fork(epoch as u64);
    let perm = ers.fork(0).permutation(n);
    let mut trace = Vec::with_capacity(n / b);
    for (k, idx) in perm.chunks_exact(b).enumerate() {
        let mut brs = ers.fork(k as u64 + 1);
        let (x1, x2) = source.batch(idx, &mut brs)?;
        let out = model.train_step(&x1, &x2)?;
        trace.push(BatchRecord {
            epoch,
            batch: k,
            loss: out.loss,
            alignment: out.alignment,
            uniformity: out.uniformity,
        });
    }
    Ok(trace)
}
