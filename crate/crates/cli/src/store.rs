//! On-disk layout, locking, CSV/JSON persistence and manifests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shiftlab_core::probe::ProbeModel;
use shiftlab_core::scm::{Geometry, LatentPoint, Split, NUM_VARS, VAR_NAMES};
use shiftlab_core::ssl::BatchRecord;
use shiftlab_core::ssl::{Objective, SslModel};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Directory of one seed: `<out>/seed-<seed>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, seed: u64) -> Self {
        Self {
            root: out.join(format!("seed-{seed}")),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.csv", split.tag()))
    }

    pub fn scm_json(&self) -> PathBuf {
        self.data_dir().join("scm.json")
    }

    pub fn generator_json(&self) -> PathBuf {
        self.data_dir().join("generator.json")
    }

    pub fn objective_dir(&self, objective: Objective) -> PathBuf {
        self.root.join(objective.name())
    }

    pub fn encoder(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("encoder.json")
    }

    pub fn loss_trace(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("loss_trace.csv")
    }

    pub fn probe(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("probe.json")
    }

    pub fn stable_map(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("stable_map.json")
    }

    pub fn stability(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("stability.csv")
    }

    pub fn plot_n(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("plot_n.csv")
    }

    pub fn plot_k(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("plot_k.csv")
    }

    pub fn identify(&self, objective: Objective) -> PathBuf {
        self.objective_dir(objective).join("identify.json")
    }
}

/// Exclusive ownership of a directory for the lifetime of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(format!("cannot create {}", dir.display()), e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::config(format!(
                "{} is in use by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(format!("cannot lock {}", dir.display()), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(format!("cannot read {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes via a sibling temp file and rename so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(format!("cannot create {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(format!("cannot write {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(format!("cannot move {} into place", path.display()), e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(value).expect("value serializes");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, &to_json_bytes(value))
}

/// Parses a JSON artifact, checking its `schema_version` before the body.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::data(format!("{what} is not valid JSON: {e}")))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CHECKPOINT_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(CliError::data(format!(
                "{what} has schema version {v}; this build reads version {CHECKPOINT_SCHEMA_VERSION} and has no migration from {v}"
            )))
        }
        None => return Err(CliError::data(format!("{what} has no schema_version"))),
    }
    serde_json::from_value(value).map_err(|e| CliError::data(format!("{what} does not match the schema: {e}")))
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::data(format!("missing {what} at {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(format!("cannot read {}", path.display()), e))?;
    parse_versioned(&text, &format!("{what} {}", path.display()))
}

/// Stream identifiers needed to continue training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSeeds {
    pub seed: u64,
    pub init_stream: u64,
    pub epoch_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCheckpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub objective: Objective,
    pub epochs_done: usize,
    pub streams: StreamSeeds,
    pub model: SslModel,
    pub trace: Vec<BatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCheckpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub objective: Objective,
    pub probe: ProbeModel,
    pub warnings: Vec<String>,
}

/// Rejects artifacts produced under a different configuration.
pub fn check_hash(found: &str, expected: &str, what: &Path) -> CliResult<()> {
    if found != expected {
        return Err(CliError::config(format!(
            "{} was produced with config hash {found}, current config hashes to {expected}",
            what.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

/// Adds `files` (inside `dir`) to `dir/manifest.json`, starting over when
/// the existing manifest belongs to another config.
pub fn record_manifest(dir: &Path, config_hash: &str, files: &[PathBuf]) -> CliResult<()> {
    let path = dir.join("manifest.json");
    let mut manifest = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        .filter(|m| m.config_hash == config_hash)
        .unwrap_or(Manifest {
            config_hash: config_hash.to_string(),
            files: BTreeMap::new(),
        });
    for f in files {
        let name = f
            .strip_prefix(dir)
            .unwrap_or(f)
            .to_string_lossy()
            .into_owned();
        manifest.files.insert(name, sha256_file(f)?);
    }
    write_atomic(&path, &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").into_bytes())
}

pub fn dataset_header() -> Vec<&'static str> {
    let mut h = vec!["class_id"];
    h.extend(VAR_NAMES);
    h.push("split");
    h
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::data(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

pub fn write_dataset(path: &Path, latents: &[LatentPoint], split: Split) -> CliResult<()> {
    let rows = latents.iter().map(|z| {
        let mut r = Vec::with_capacity(NUM_VARS + 2);
        r.push(z.class_id.to_string());
        r.extend(z.vars.iter().map(|v| v.to_string()));
        r.push(split.tag().to_string());
        r
    });
    write_csv(path, &dataset_header(), rows)
}

pub fn read_dataset(path: &Path, geometry: Geometry, split: Split) -> CliResult<Vec<LatentPoint>> {
    if !path.exists() {
        return Err(CliError::data(format!("missing dataset {} (run generate first)", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    if header != dataset_header() {
        return Err(CliError::data(format!("{} has columns {header:?}, expected {:?}", path.display(), dataset_header())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| CliError::data(format!("{} row {}: bad {what}", path.display(), i + 1));
        let class_id = rec[0].parse().map_err(|_| bad("class_id"))?;
        let mut vars = [0.0; NUM_VARS];
        for (v, slot) in vars.iter_mut().enumerate() {
            *slot = rec[v + 1].parse().map_err(|_| bad(VAR_NAMES[v]))?;
        }
        if &rec[NUM_VARS + 1] != split.tag() {
            return Err(bad("split tag"));
        }
        out.push(LatentPoint {
            class_id,
            vars,
            geometry,
        });
    }
    Ok(out)
}

pub const TRACE_HEADER: [&str; 5] = ["epoch", "batch", "loss", "alignment", "uniformity"];

pub fn write_trace(path: &Path, trace: &[BatchRecord]) -> CliResult<()> {
    let rows = trace.iter().map(|t| {
        vec![
            t.epoch.to_string(),
            t.batch.to_string(),
            t.loss.map(|l| l.to_string()).unwrap_or_default(),
            t.alignment.to_string(),
            t.uniformity.to_string(),
        ]
    });
    write_csv(path, &TRACE_HEADER, rows)
}

pub const REPORT_HEADER: [&str; 8] = ["objective", "geometry", "n", "method", "metric", "value", "stderr", "seed"];

/// One report line; `seed` is a number for single runs and `all` for aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub objective: String,
    pub geometry: String,
    pub n: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub seed: String,
}

pub fn write_report(path: &Path, rows: &[ReportLine]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    if rows.is_empty() {
        return write_csv(path, &REPORT_HEADER, std::iter::empty());
    }
    write_atomic(path, &bytes)
}

pub fn read_report(path: &Path) -> CliResult<Vec<ReportLine>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ReportLine>, _>>()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
