//! Experiment configuration: one JSON document per run, hashed for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shiftlab_core::generator::{GeneratorConfig, GeneratorKind};
use shiftlab_core::probe::ProbeTraining;
use shiftlab_core::scm::{Geometry, InterventionRange, InterventionSpec, ScmSpec, ELIGIBLE};
use shiftlab_core::ssl::AugmentPolicy;
use shiftlab_core::ssl::{Objective, SslConfig};
use shiftlab_core::stability::StableMapTraining;

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// The causal model, either inline or as a path to an SCM JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScmSource {
    Inline(ScmSpec),
    File(PathBuf),
}

impl Default for ScmSource {
    fn default() -> Self {
        ScmSource::Inline(ScmSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// vMF concentration of positive pairs in sphere geometry.
    pub kappa: f64,
    /// Variables redrawn from their seen range for positive pairs in box geometry.
    pub resample: Vec<String>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            kappa: 20.0,
            resample: ["hue_obj", "hue_spl", "hue_bg", "pos_z"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSizes {
    pub train: usize,
    pub test_seen: usize,
    pub test_holdout: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self {
            train: 20_000,
            test_seen: 4_000,
            test_holdout: 4_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySettings {
    pub n_values: Vec<usize>,
    /// Percentages of dimensions kept by the robust-dimensions remedy.
    pub k_grid: Vec<f64>,
    pub num_neighbors: usize,
    /// Test-seen points paired per shift subset.
    pub max_points: usize,
    /// Train points used to build stable-map training pairs.
    pub stable_map_points: usize,
    pub stable_map: StableMapTraining,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        Self {
            n_values: vec![1, 2, 3, 4],
            k_grid: vec![10.0, 30.0, 50.0, 70.0, 90.0, 100.0],
            num_neighbors: 5,
            max_points: 500,
            stable_map_points: 2_000,
            stable_map: StableMapTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifySettings {
    pub holdout_fraction: f64,
    /// Directions sampled for each side of the nullspace test.
    pub directions: usize,
}

impl Default for IdentifySettings {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            directions: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub geometry: Geometry,
    pub scm: ScmSource,
    pub holdout_threshold: f64,
    pub generator: GeneratorConfig,
    pub augmentation: AugmentationConfig,
    pub ssl: SslConfig,
    pub epochs: usize,
    pub probe: ProbeTraining,
    pub dataset: DatasetSizes,
    pub stability: StabilitySettings,
    pub identify: IdentifySettings,
    /// Output root; not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            geometry: Geometry::Box,
            scm: ScmSource::default(),
            holdout_threshold: 0.8,
            generator: GeneratorConfig::default(),
            augmentation: AugmentationConfig::default(),
            ssl: SslConfig::default(),
            epochs: 20,
            probe: ProbeTraining::default(),
            dataset: DatasetSizes::default(),
            stability: StabilitySettings::default(),
            identify: IdentifySettings::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Sphere latents through an orthogonal map into an 8-d representation.
    pub fn sphere_identifiability() -> Self {
        let mut cfg = Self {
            geometry: Geometry::Sphere,
            ..Self::default()
        };
        cfg.generator.geometry = Geometry::Sphere;
        cfg.generator.kind = GeneratorKind::OrthogonalLinear;
        cfg.generator.class_embed_dim = 0;
        cfg.ssl.rep_dim = 8;
        cfg
    }

    /// Box latents, orthogonal map, no class block, 8-d representation.
    pub fn box_linear() -> Self {
        let mut cfg = Self::sphere_identifiability();
        cfg.geometry = Geometry::Box;
        cfg.generator.geometry = Geometry::Box;
        cfg
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::config(format!("config is not valid JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CONFIG_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(CliError::config(format!(
                    "config schema version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})"
                )))
            }
            None => return Err(CliError::config("config is missing schema_version")),
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("config schema version {} is not supported", self.schema_version));
        }
        if self.generator.geometry != self.geometry {
            return bad(format!(
                "generator geometry {:?} differs from experiment geometry {:?}",
                self.generator.geometry, self.geometry
            ));
        }
        self.ssl.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        let d = &self.dataset;
        if d.train < self.ssl.batch_size || d.test_seen == 0 || d.test_holdout == 0 {
            return bad(format!("dataset sizes {d:?} too small for batch size {}", self.ssl.batch_size));
        }
        let s = &self.stability;
        if s.n_values.iter().any(|n| !(1..=ELIGIBLE.len()).contains(n)) {
            return bad(format!("stability n values {:?} outside 1..={}", s.n_values, ELIGIBLE.len()));
        }
        if s.k_grid.iter().any(|k| !(*k > 0.0 && *k <= 100.0)) {
            return bad(format!("k grid {:?} outside (0, 100]", s.k_grid));
        }
        if s.num_neighbors == 0 || s.max_points == 0 || s.stable_map_points == 0 {
            return bad("stability neighbour and point counts must be positive".into());
        }
        if !(self.augmentation.kappa >= 0.0) {
            return bad(format!("kappa must be non-negative, got {}", self.augmentation.kappa));
        }
        self.augment_policy()?;
        Ok(())
    }

    pub fn scm_spec(&self) -> CliResult<ScmSpec> {
        match &self.scm {
            ScmSource::Inline(spec) => Ok(spec.clone()),
            ScmSource::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read SCM spec {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid SCM spec {}: {e}", path.display())))
            }
        }
    }

    pub fn augment_policy(&self) -> CliResult<AugmentPolicy> {
        Ok(match self.geometry {
            Geometry::Sphere => AugmentPolicy::Vmf {
                kappa: self.augmentation.kappa,
            },
            Geometry::Box => {
                let names: Vec<&str> = self.augmentation.resample.iter().map(String::as_str).collect();
                AugmentPolicy::Resample(InterventionSpec::from_names(&names, InterventionRange::Seen)?)
            }
        })
    }

    pub fn objective(&self) -> Objective {
        self.ssl.objective
    }

    /// SHA-256 of the canonical JSON with the output directory removed.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        ExperimentConfig::sphere_identifiability().validate().unwrap();
        ExperimentConfig::box_linear().validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "seed": 7, "ssl": {"objective": "barlow"}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.objective(), Objective::Barlow);
        assert_eq!(cfg.ssl.tau, 0.07);
        assert_eq!(cfg.stability.num_neighbors, 5);
    }

    #[test]
    fn unknown_fields_and_versions_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "sede": 7}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "ssl": {"temperature": 0.1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seed": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "geometry": "sphere"}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: Some("/tmp/elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
