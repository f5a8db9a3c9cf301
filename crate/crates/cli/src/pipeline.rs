//! The experiment stages behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use shiftlab_core::generator::GeneratorSpec;
use shiftlab_core::identify::{fit_a, nullspace_test, seen_unseen_gap, LinearMapFit, NullspaceReport};
use shiftlab_core::numerics::{norm, DenseMatrix};
use shiftlab_core::probe::{label_scores, train_probe, ProbeModel};
use shiftlab_core::sampling::RandomStream;
use shiftlab_core::scm::{
    do_intervene, sample_dataset, Geometry, HoldoutRule, InterventionRange, InterventionSpec, LatentPoint, Scm, Split,
    ELIGIBLE,
};
use shiftlab_core::ssl::{train_epoch, AugmentPolicy, PairSource};
use shiftlab_core::ssl::{Objective, SslModel, Which};
use shiftlab_core::stability::{
    deterioration, evaluate_remedy, fit_stable_map, make_unstable_pairs, mean_stderr, Metric, NeighborChoice, PairOptions, Remedy,
    RepSet, ShiftContext, StableMap, SubsetPlan, UnstablePair,
};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::store::{
    check_hash, read_dataset, read_report, read_versioned, record_manifest, sha256_file, write_csv,
    write_dataset, write_json, write_report, write_trace, EncoderCheckpoint, ProbeCheckpoint, ReportLine, RunLayout,
    StreamSeeds, CHECKPOINT_SCHEMA_VERSION,
};

const DATA_STREAM: u64 = 0xDA7A_0000;
const CALIBRATION_STREAM: u64 = 0xDA7A_0003;
const TRAIN_STREAM: u64 = 0x7EA1_0000;
const PROBE_STREAM: u64 = 0x960B_E000;
const PAIRS_STREAM: u64 = 0x9A12_5000;
const STABLE_MAP_STREAM: u64 = 0x57AB_1E00;
const IDENTIFY_STREAM: u64 = 0x1DE7_0000;
const VERIFY_STREAM: u64 = 0x7E21_F000;

/// Rows pushed through the encoder at once.
const ENCODE_CHUNK: usize = 2048;

/// Causal model, hold-out rule, mixing function and augmentation of a config.
pub struct World {
    pub scm: Scm,
    pub rule: HoldoutRule,
    pub generator: GeneratorSpec,
    pub policy: AugmentPolicy,
}

impl World {
    pub fn new(cfg: &ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let scm = Scm::new(cfg.scm_spec()?)?;
        if scm.num_classes() != cfg.generator.num_classes {
            return Err(CliError::config(format!(
                "SCM has {} classes but the generator embeds {}",
                scm.num_classes(),
                cfg.generator.num_classes
            )));
        }
        let rule = HoldoutRule::new(&scm, cfg.holdout_threshold)?;
        let generator = GeneratorSpec::new(cfg.generator.clone(), cfg.seed)?;
        Ok(Self {
            scm,
            rule,
            generator,
            policy: cfg.augment_policy()?,
        })
    }

    pub fn sample(&self, cfg: &ExperimentConfig, split: Split, n: usize, stream: u64) -> CliResult<Vec<LatentPoint>> {
        Ok(sample_dataset(&self.scm, &self.rule, cfg.geometry, split, n, &RandomStream::new(cfg.seed, stream))?)
    }

    pub fn observe(&self, latents: &[LatentPoint]) -> CliResult<DenseMatrix> {
        Ok(self.generator.generate_batch(&self.generator.embed_batch(latents)?)?)
    }
}

fn split_size(cfg: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::TrainSeen => cfg.dataset.train,
        Split::TestSeen => cfg.dataset.test_seen,
        Split::TestHoldout => cfg.dataset.test_holdout,
    }
}

const SPLITS: [Split; 3] = [Split::TrainSeen, Split::TestSeen, Split::TestHoldout];

#[derive(Debug, Serialize)]
struct ScmExport<'a> {
    config_hash: String,
    holdout_threshold: f64,
    spec: &'a shiftlab_core::scm::ScmSpec,
}

#[derive(Debug, Serialize)]
struct GeneratorExport<'a> {
    config_hash: String,
    generator: &'a GeneratorSpec,
}

/// Writes the three dataset splits, the SCM and the generator.
pub fn generate(cfg: &ExperimentConfig, layout: &RunLayout) -> CliResult<Vec<PathBuf>> {
    let world = World::new(cfg)?;
    let hash = cfg.hash();
    let mut written = Vec::new();
    for (i, split) in SPLITS.into_iter().enumerate() {
        let latents = world.sample(cfg, split, split_size(cfg, split), DATA_STREAM + i as u64)?;
        let path = layout.dataset(split);
        write_dataset(&path, &latents, split)?;
        written.push(path);
    }
    write_json(
        &layout.scm_json(),
        &ScmExport {
            config_hash: hash.clone(),
            holdout_threshold: cfg.holdout_threshold,
            spec: world.scm.spec(),
        },
    )?;
    write_json(
        &layout.generator_json(),
        &GeneratorExport {
            config_hash: hash.clone(),
            generator: &world.generator,
        },
    )?;
    written.push(layout.scm_json());
    written.push(layout.generator_json());
    record_manifest(&layout.data_dir(), &hash, &written)?;
    Ok(written)
}

/// Reads a split and checks it against the config.
pub fn load_split(cfg: &ExperimentConfig, layout: &RunLayout, split: Split) -> CliResult<Vec<LatentPoint>> {
    let path = layout.dataset(split);
    let latents = read_dataset(&path, cfg.geometry, split)?;
    if latents.len() != split_size(cfg, split) {
        return Err(CliError::data(format!(
            "{} has {} rows, config asks for {}",
            path.display(),
            latents.len(),
            split_size(cfg, split)
        )));
    }
    for (i, z) in latents.iter().enumerate() {
        let ok = match cfg.geometry {
            Geometry::Sphere => (norm(&z.vars) - 1.0).abs() < 1e-9,
            Geometry::Box => z.vars.iter().all(|v| (-1.0..=1.0).contains(v)),
        };
        if !ok || z.class_id >= cfg.generator.num_classes {
            return Err(CliError::data(format!(
                "{} row {} is not a {:?} latent of this config",
                path.display(),
                i + 1,
                cfg.geometry
            )));
        }
    }
    Ok(latents)
}

fn stream_seeds(cfg: &ExperimentConfig) -> StreamSeeds {
    let base = RandomStream::new(cfg.seed, TRAIN_STREAM);
    StreamSeeds {
        seed: cfg.seed,
        init_stream: base.fork(0).stream_id(),
        epoch_stream: base.fork(1).stream_id(),
    }
}

fn hash_free_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs_done: usize,
    pub final_loss: Option<f64>,
}

/// Trains the configured objective, checkpointing after every epoch.
///
/// `stop_after` ends the run once that many epochs are complete, leaving a
/// checkpoint that `resume` can continue from.
pub fn train(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> CliResult<TrainSummary> {
    let world = World::new(cfg)?;
    let hash = cfg.hash();
    let objective = cfg.objective();
    let latents = load_split(cfg, layout, Split::TrainSeen)?;
    let seeds = stream_seeds(cfg);
    let mut ckpt = match resume {
        Some(path) => {
            let ckpt: EncoderCheckpoint = read_versioned(path, "encoder checkpoint")?;
            check_hash(&ckpt.config_hash, &hash, path)?;
            if ckpt.model.input_dim != world.generator.dim() {
                return Err(CliError::data(format!(
                    "checkpoint encoder takes {} inputs, generator emits {}",
                    ckpt.model.input_dim,
                    world.generator.dim()
                )));
            }
            ckpt
        }
        None => {
            let mut init = RandomStream::new(cfg.seed, seeds.init_stream);
            EncoderCheckpoint {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                config_hash: hash.clone(),
                config: hash_free_config(cfg),
                objective,
                epochs_done: 0,
                streams: seeds,
                model: SslModel::new(cfg.ssl.clone(), world.generator.dim(), &mut init)?,
                trace: Vec::new(),
            }
        }
    };
    let source = PairSource {
        scm: &world.scm,
        rule: &world.rule,
        generator: &world.generator,
        latents: &latents,
        policy: &world.policy,
    };
    let base = RandomStream::new(cfg.seed, ckpt.streams.epoch_stream);
    let enc_path = layout.encoder(objective);
    let trace_path = layout.loss_trace(objective);
    while ckpt.epochs_done < cfg.epochs {
        let records = train_epoch(&mut ckpt.model, &source, ckpt.epochs_done, &base)?;
        ckpt.trace.extend(records);
        ckpt.epochs_done += 1;
        write_json(&enc_path, &ckpt)?;
        write_trace(&trace_path, &ckpt.trace)?;
        if stop_after == Some(ckpt.epochs_done) {
            break;
        }
    }
    if ckpt.epochs_done == cfg.epochs {
        write_json(&enc_path, &ckpt)?;
        write_trace(&trace_path, &ckpt.trace)?;
        record_manifest(&layout.objective_dir(objective), &hash, &[enc_path.clone(), trace_path])?;
    }
    Ok(TrainSummary {
        checkpoint: enc_path,
        epochs_done: ckpt.epochs_done,
        final_loss: ckpt.trace.iter().rev().find_map(|t| t.loss),
    })
}

/// Loads the trained encoder of the configured objective.
pub fn load_encoder(cfg: &ExperimentConfig, layout: &RunLayout) -> CliResult<EncoderCheckpoint> {
    let path = layout.encoder(cfg.objective());
    let ckpt: EncoderCheckpoint = read_versioned(&path, "encoder checkpoint")?;
    check_hash(&ckpt.config_hash, &cfg.hash(), &path)?;
    if ckpt.epochs_done < cfg.epochs {
        return Err(CliError::data(format!(
            "{} holds {} of {} epochs; resume training first",
            path.display(),
            ckpt.epochs_done,
            cfg.epochs
        )));
    }
    Ok(ckpt)
}

/// Online-encoder representations, computed in chunks.
pub fn encode(model: &SslModel, x: &DenseMatrix) -> shiftlab_core::Result<DenseMatrix> {
    if x.rows() <= ENCODE_CHUNK {
        return model.encode(x, Which::Online);
    }
    let mut rows = Vec::with_capacity(x.rows() * model.config.rep_dim);
    for start in (0..x.rows()).step_by(ENCODE_CHUNK) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(x.rows())).collect();
        rows.extend_from_slice(model.encode(&x.select_rows(&idx), Which::Online)?.as_slice());
    }
    DenseMatrix::from_vec(x.rows(), model.config.rep_dim, rows)
}

fn labels(latents: &[LatentPoint]) -> Vec<usize> {
    latents.iter().map(|z| z.class_id).collect()
}

/// Fits the linear probe on train-split representations and saves it.
pub fn probe(cfg: &ExperimentConfig, layout: &RunLayout) -> CliResult<ProbeCheckpoint> {
    let world = World::new(cfg)?;
    let enc = load_encoder(cfg, layout)?;
    let train = load_split(cfg, layout, Split::TrainSeen)?;
    let reps = encode(&enc.model, &world.observe(&train)?)?;
    let (mut model, warnings) = train_probe(
        &reps,
        &labels(&train),
        world.scm.num_classes(),
        &cfg.probe,
        &RandomStream::new(cfg.seed, PROBE_STREAM),
    )?;
    let objective = cfg.objective();
    model.trained_on = sha256_file(&layout.encoder(objective))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let ckpt = ProbeCheckpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        objective,
        probe: model,
        warnings,
    };
    let path = layout.probe(objective);
    write_json(&path, &ckpt)?;
    record_manifest(&layout.objective_dir(objective), &ckpt.config_hash, &[path])?;
    Ok(ckpt)
}

fn load_or_train_probe(cfg: &ExperimentConfig, layout: &RunLayout) -> CliResult<ProbeModel> {
    let path = layout.probe(cfg.objective());
    if !path.exists() {
        return Ok(probe(cfg, layout)?.probe);
    }
    let ckpt: ProbeCheckpoint = read_versioned(&path, "probe checkpoint")?;
    check_hash(&ckpt.config_hash, &cfg.hash(), &path)?;
    let enc_sha = sha256_file(&layout.encoder(cfg.objective()))?;
    if ckpt.probe.trained_on != enc_sha {
        return Err(CliError::config(format!("{} was fitted on a different encoder checkpoint", path.display())));
    }
    Ok(ckpt.probe)
}

/// Sweep results for one shift size.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftResult {
    pub n: usize,
    pub pairs: usize,
    /// `(method tag, metric, stable mean, unstable mean)` per remedy and metric.
    pub outcomes: Vec<(String, Metric, f64, f64)>,
}

impl ShiftResult {
    pub fn get(&self, method: &str, metric: Metric) -> Option<(f64, f64)> {
        self.outcomes
            .iter()
            .find(|(m, me, _, _)| m == method && *me == metric)
            .map(|&(_, _, s, u)| (s, u))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub seen_accuracy: f64,
    pub holdout_accuracy: f64,
    pub seen_unseen_gap: f64,
    pub shifts: Vec<ShiftResult>,
    pub rows: Vec<ReportLine>,
    pub identify: IdentifyReport,
}

impl EvaluateSummary {
    pub fn shift(&self, n: usize) -> Option<&ShiftResult> {
        self.shifts.iter().find(|s| s.n == n)
    }
}

fn stable_map_for(
    cfg: &ExperimentConfig,
    ctx: &ShiftContext<'_>,
    world: &World,
    layout: &RunLayout,
    probe: &ProbeModel,
) -> CliResult<StableMap> {
    let train = load_split(cfg, layout, Split::TrainSeen)?;
    let take = cfg.stability.stable_map_points.min(train.len());
    let seen = ctx.rep_set(train[..take].to_vec())?;
    let calibration = world.sample(cfg, Split::TestHoldout, cfg.dataset.test_holdout, CALIBRATION_STREAM)?;
    let opts = PairOptions {
        num_neighbors: cfg.stability.num_neighbors,
        choice: NeighborChoice::Random,
        subsets: SubsetPlan::Sample,
    };
    let rs = RandomStream::new(cfg.seed, STABLE_MAP_STREAM);
    let pairs = make_unstable_pairs(ctx, &seen, &calibration, 1, &opts, probe, &rs.fork(0))?;
    let stable = DenseMatrix::from_rows(&pairs.iter().map(|p| p.stable_rep.clone()).collect::<Vec<_>>())?;
    let unstable = DenseMatrix::from_rows(&pairs.iter().map(|p| p.unstable_rep.clone()).collect::<Vec<_>>())?;
    let (mut map, warnings) = fit_stable_map(&unstable, &stable, &cfg.stability.stable_map, &rs.fork(1))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    map.trained_on = sha256_file(&layout.encoder(cfg.objective()))?;
    Ok(map)
}

/// The first `max_points` test-seen points, which get paired with shifts.
fn pairing_subset(cfg: &ExperimentConfig, test_seen: &RepSet) -> RepSet {
    let take = cfg.stability.max_points.min(test_seen.len());
    let idx: Vec<usize> = (0..take).collect();
    RepSet {
        latents: test_seen.latents[..take].to_vec(),
        reps: test_seen.reps.select_rows(&idx),
    }
}

fn test_pairs(
    cfg: &ExperimentConfig,
    ctx: &ShiftContext<'_>,
    seen: &RepSet,
    pool: &[LatentPoint],
    probe: &ProbeModel,
    n: usize,
) -> CliResult<Vec<UnstablePair>> {
    let opts = PairOptions {
        num_neighbors: cfg.stability.num_neighbors,
        ..PairOptions::default()
    };
    let rs = RandomStream::new(cfg.seed, PAIRS_STREAM).fork(n as u64);
    Ok(make_unstable_pairs(ctx, seen, pool, n, &opts, probe, &rs)?)
}

/// Unremedied deterioration at shift size `n`, computed from the saved
/// encoder and probe without touching any report.
pub fn standalone_deterioration(cfg: &ExperimentConfig, layout: &RunLayout, n: usize, metric: Metric) -> CliResult<f64> {
    let world = World::new(cfg)?;
    let enc = load_encoder(cfg, layout)?;
    let probe: ProbeCheckpoint = read_versioned(&layout.probe(cfg.objective()), "probe checkpoint")?;
    let encoder = |x: &DenseMatrix| encode(&enc.model, x);
    let ctx = ShiftContext {
        scm: &world.scm,
        rule: &world.rule,
        generator: &world.generator,
        encoder: &encoder,
    };
    let seen = pairing_subset(cfg, &ctx.rep_set(load_split(cfg, layout, Split::TestSeen)?)?);
    let pool = load_split(cfg, layout, Split::TestHoldout)?;
    let pairs = test_pairs(cfg, &ctx, &seen, &pool, &probe.probe, n)?;
    Ok(deterioration(&pairs, &probe.probe, metric)?)
}

/// Probe (if absent), deterioration and remedy sweeps, identifiability fit.
pub fn evaluate(cfg: &ExperimentConfig, layout: &RunLayout) -> CliResult<EvaluateSummary> {
    let world = World::new(cfg)?;
    let enc = load_encoder(cfg, layout)?;
    let probe = load_or_train_probe(cfg, layout)?;
    let objective = cfg.objective();
    let hash = cfg.hash();
    let encoder = |x: &DenseMatrix| encode(&enc.model, x);
    let ctx = ShiftContext {
        scm: &world.scm,
        rule: &world.rule,
        generator: &world.generator,
        encoder: &encoder,
    };
    let test_seen = ctx.rep_set(load_split(cfg, layout, Split::TestSeen)?)?;
    let test_hold = ctx.rep_set(load_split(cfg, layout, Split::TestHoldout)?)?;
    let gap = seen_unseen_gap(&probe, &test_seen.reps, &test_seen.labels(), &test_hold.reps, &test_hold.labels())?;

    let geometry = format!("{:?}", cfg.geometry).to_lowercase();
    let line = |n: usize, method: &str, metric: &str, (value, stderr): (f64, f64)| ReportLine {
        objective: objective.name().into(),
        geometry: geometry.clone(),
        n,
        method: method.into(),
        metric: metric.into(),
        value,
        stderr,
        seed: cfg.seed.to_string(),
    };
    let seen_labels = test_seen.labels();
    let correct: Vec<f64> = probe
        .predict(&test_seen.reps)?
        .iter()
        .zip(&seen_labels)
        .map(|(p, l)| f64::from(p == l))
        .collect();
    let mut rows = vec![
        line(0, "none", "accuracy", mean_stderr(&correct)),
        line(0, "none", "score", mean_stderr(&label_scores(&probe, &test_seen.reps, &seen_labels)?)),
        line(0, "none", "seen_unseen_gap", (gap.gap, 0.0)),
    ];

    let mut shifts = Vec::new();
    let mut plot_k = Vec::new();
    if cfg.geometry == Geometry::Box {
        let map = stable_map_for(cfg, &ctx, &world, layout, &probe)?;
        write_json(&layout.stable_map(objective), &map)?;
        let seen = pairing_subset(cfg, &test_seen);
        let mut remedies = vec![Remedy::None];
        remedies.extend(cfg.stability.k_grid.iter().map(|&k| Remedy::Robust { k_percent: k }));
        remedies.push(Remedy::StableMap(&map));
        for &n in &cfg.stability.n_values {
            let pairs = test_pairs(cfg, &ctx, &seen, &test_hold.latents, &probe, n)?;
            let mut outcomes = Vec::new();
            for remedy in &remedies {
                let tag = remedy.tag();
                for metric in [Metric::Accuracy, Metric::Score] {
                    let out = evaluate_remedy(&pairs, &probe, *remedy, metric)?;
                    let diffs: Vec<f64> = out.stable.iter().zip(&out.unstable).map(|(s, u)| s - u).collect();
                    let m = metric.name();
                    rows.push(line(n, &tag, &format!("stable_{m}"), mean_stderr(&out.stable)));
                    rows.push(line(n, &tag, &format!("unstable_{m}"), mean_stderr(&out.unstable)));
                    rows.push(line(n, &tag, &format!("deterioration_{m}"), mean_stderr(&diffs)));
                    if let (Remedy::Robust { k_percent }, Metric::Accuracy) = (remedy, metric) {
                        plot_k.push(vec![
                            n.to_string(),
                            k_percent.to_string(),
                            out.stable_mean().to_string(),
                            out.unstable_mean().to_string(),
                            out.deterioration().to_string(),
                        ]);
                    }
                    outcomes.push((tag.clone(), metric, out.stable_mean(), out.unstable_mean()));
                }
            }
            shifts.push(ShiftResult {
                n,
                pairs: pairs.len(),
                outcomes,
            });
        }
    }

    let ident = identify_with(cfg, &world, &enc, &test_seen)?;
    write_json(&layout.identify(objective), &ident)?;

    let stability_path = layout.stability(objective);
    write_report(&stability_path, &rows)?;
    let plot_n_path = layout.plot_n(objective);
    write_csv(
        &plot_n_path,
        &["n", "method", "metric", "value"],
        rows.iter()
            .map(|r| vec![r.n.to_string(), r.method.clone(), r.metric.clone(), r.value.to_string()]),
    )?;
    let plot_k_path = layout.plot_k(objective);
    write_csv(&plot_k_path, &["n", "k", "stable_accuracy", "unstable_accuracy", "gap"], plot_k)?;
    let mut outputs = vec![stability_path, plot_n_path, plot_k_path, layout.identify(objective)];
    if cfg.geometry == Geometry::Box {
        outputs.push(layout.stable_map(objective));
    }
    record_manifest(&layout.objective_dir(objective), &hash, &outputs)?;
    Ok(EvaluateSummary {
        seen_accuracy: gap.seen_accuracy,
        holdout_accuracy: gap.holdout_accuracy,
        seen_unseen_gap: gap.gap,
        shifts,
        rows,
        identify: ident,
    })
}

/// Fit summary written by `identify` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub config_hash: String,
    pub objective: Objective,
    pub latent_dim: usize,
    pub rep_dim: usize,
    pub scale: f64,
    pub gram_deviation: f64,
    pub mean_r2: f64,
    pub min_r2: f64,
    pub n_fit: usize,
    pub n_holdout: usize,
    /// Box geometry only; sphere latents have no hold-out ranges.
    pub nullspace: Option<NullspaceReport>,
}

/// Unit hold-out displacements: one random eligible variable per sample.
pub fn holdout_directions(
    world: &World,
    latents: &[LatentPoint],
    count: usize,
    rs: &mut RandomStream,
) -> CliResult<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    while out.len() < count {
        let z = &latents[i % latents.len()];
        i += 1;
        let var = ELIGIBLE[rs.below(ELIGIBLE.len())];
        let iv = InterventionSpec::new([var], InterventionRange::Holdout)?;
        let shifted = do_intervene(&world.scm, &world.rule, z, &iv, rs)?;
        let a = world.generator.embed_latent(z)?;
        let b = world.generator.embed_latent(&shifted)?;
        let d: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let len = norm(&d);
        if len > 1e-12 {
            out.push(d.into_iter().map(|v| v / len).collect());
        }
    }
    Ok(out)
}

fn identify_with(cfg: &ExperimentConfig, world: &World, enc: &EncoderCheckpoint, seen: &RepSet) -> CliResult<IdentifyReport> {
    let embedded = world.generator.embed_batch(&seen.latents)?;
    let fit: LinearMapFit = fit_a(&embedded, &seen.reps, cfg.identify.holdout_fraction)?;
    let nullspace = match cfg.geometry {
        Geometry::Sphere => None,
        Geometry::Box => {
            let rs = RandomStream::new(cfg.seed, IDENTIFY_STREAM);
            let source = PairSource {
                scm: &world.scm,
                rule: &world.rule,
                generator: &world.generator,
                latents: &seen.latents,
                policy: &world.policy,
            };
            let aug = source.augmentation_directions(cfg.identify.directions, &mut rs.fork(0))?;
            let hold = holdout_directions(world, &seen.latents, cfg.identify.directions, &mut rs.fork(1))?;
            Some(nullspace_test(&fit, &aug, &hold)?)
        }
    };
    Ok(IdentifyReport {
        config_hash: cfg.hash(),
        objective: enc.objective,
        latent_dim: fit.a.cols(),
        rep_dim: fit.a.rows(),
        scale: fit.scale,
        gram_deviation: fit.gram_deviation,
        mean_r2: fit.mean_r2,
        min_r2: fit.min_r2,
        n_fit: fit.n_fit,
        n_holdout: fit.n_holdout,
        nullspace,
    })
}

/// Linear-map fit between test-seen latents and representations.
pub fn identify(cfg: &ExperimentConfig, layout: &RunLayout) -> CliResult<IdentifyReport> {
    let world = World::new(cfg)?;
    let enc = load_encoder(cfg, layout)?;
    let encoder = |x: &DenseMatrix| encode(&enc.model, x);
    let ctx = ShiftContext {
        scm: &world.scm,
        rule: &world.rule,
        generator: &world.generator,
        encoder: &encoder,
    };
    let seen = ctx.rep_set(load_split(cfg, layout, Split::TestSeen)?)?;
    let report = identify_with(cfg, &world, &enc, &seen)?;
    let path = layout.identify(cfg.objective());
    write_json(&path, &report)?;
    record_manifest(&layout.objective_dir(cfg.objective()), &report.config_hash, &[path])?;
    Ok(report)
}

fn seed_dirs(out: &Path) -> CliResult<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(out).map_err(|e| io_err(format!("cannot list {}", out.display()), e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(format!("cannot list {}", out.display()), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
            dirs.push((seed, entry.path()));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Averages every per-seed stability report under `out` into `out/report.csv`.
///
/// Values are means over seeds and `stderr` is the standard error across
/// seeds; aggregate rows carry `all` in the seed column.
pub fn report(out: &Path) -> CliResult<(PathBuf, Vec<ReportLine>)> {
    let mut groups: Vec<((String, String, usize, String, String), Vec<f64>)> = Vec::new();
    let mut found = 0;
    for (_, dir) in seed_dirs(out)? {
        for objective in Objective::ALL {
            let path = dir.join(objective.name()).join("stability.csv");
            if !path.exists() {
                continue;
            }
            found += 1;
            for r in read_report(&path)? {
                let key = (r.objective, r.geometry, r.n, r.method, r.metric);
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(r.value),
                    None => groups.push((key, vec![r.value])),
                }
            }
        }
    }
    if found == 0 {
        return Err(CliError::data(format!("no stability reports under {}", out.display())));
    }
    let rows: Vec<ReportLine> = groups
        .into_iter()
        .map(|((objective, geometry, n, method, metric), values)| {
            let (value, stderr) = mean_stderr(&values);
            ReportLine {
                objective,
                geometry,
                n,
                method,
                metric,
                value,
                stderr,
                seed: "all".into(),
            }
        })
        .collect();
    let path = out.join("report.csv");
    write_report(&path, &rows)?;
    Ok((path, rows))
}

/// Loads a checkpoint, re-serializes it and checks the bytes and the
/// encoder's outputs on a fixed batch are unchanged.
pub fn verify_checkpoint(path: &Path) -> CliResult<()> {
    let bytes = fs::read(path).map_err(|e| io_err(format!("cannot read {}", path.display()), e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::data(format!("{} is not UTF-8", path.display())))?;
    let what = format!("encoder checkpoint {}", path.display());
    let ckpt: EncoderCheckpoint = crate::store::parse_versioned(&text, &what)?;
    let again = crate::store::to_json_bytes(&ckpt);
    if again != bytes {
        let at = again.iter().zip(&bytes).position(|(a, b)| a != b).unwrap_or(again.len().min(bytes.len()));
        return Err(CliError::data(format!("{} does not re-serialize identically (first difference at byte {at})", path.display())));
    }
    let reloaded: EncoderCheckpoint = crate::store::parse_versioned(
        std::str::from_utf8(&again).expect("serde_json emits UTF-8"),
        &what,
    )?;
    let mut rs = RandomStream::new(0, VERIFY_STREAM);
    let x = DenseMatrix::from_fn(64, ckpt.model.input_dim, |_, _| rs.normal());
    let a = encode(&ckpt.model, &x)?;
    let b = encode(&reloaded.model, &x)?;
    if a.as_slice().iter().zip(b.as_slice()).any(|(p, q)| p.to_bits() != q.to_bits()) {
        return Err(CliError::data(format!("{} changes encoder outputs after a round trip", path.display())));
    }
    Ok(())
}
