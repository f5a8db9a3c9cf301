//! Unstable-shift protocol, deterioration, and the two inference-time remedies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::generator::GeneratorSpec;
use crate::numerics::{AdamConfig, AdamState, CompGraph, DenseMatrix};
use crate::probe::{label_scores, ProbeModel};
use crate::sampling::RandomStream;
use crate::scm::{
    do_intervene, nearest_neighbors, HoldoutRule, InterventionRange, InterventionSpec, LatentPoint, Scm, ELIGIBLE,
    VAR_NAMES,
};

/// Everything needed to turn latents into representations.
pub struct ShiftContext<'a> {
    pub scm: &'a Scm,
    pub rule: &'a HoldoutRule,
    pub generator: &'a GeneratorSpec,
    /// Frozen encoder: observations to unit-norm representations.
    pub encoder: &'a dyn Fn(&DenseMatrix) -> Result<DenseMatrix>,
}

impl ShiftContext<'_> {
    pub fn represent(&self, latents: &[LatentPoint]) -> Result<DenseMatrix> {
        let x = self.generator.generate_batch(&self.generator.embed_batch(latents)?)?;
        (self.encoder)(&x)
    }

    pub fn rep_set(&self, latents: Vec<LatentPoint>) -> Result<RepSet> {
        let reps = self.represent(&latents)?;
        Ok(RepSet { latents, reps })
    }

    /// Copy of `pool` with every member's `subset` redrawn from hold-out ranges.
    pub fn shifted_pool(&self, pool: &[LatentPoint], subset: &[usize], rs: &RandomStream) -> Result<RepSet> {
        let iv = InterventionSpec::new(subset.iter().copied(), InterventionRange::Holdout)?;
        let latents = pool
            .iter()
            .enumerate()
            .map(|(j, z)| do_intervene(self.scm, self.rule, z, &iv, &mut rs.fork(j as u64)))
            .collect::<Result<Vec<_>>>()?;
        self.rep_set(latents)
    }
}

/// Latents with their representations, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct RepSet {
    pub latents: Vec<LatentPoint>,
    pub reps: DenseMatrix,
}

impl RepSet {
    pub fn labels(&self) -> Vec<usize> {
        self.latents.iter().map(|z| z.class_id).collect()
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstablePair {
    /// Row of the seen test point in its [`RepSet`].
    pub stable_index: usize,
    pub class_id: usize,
    pub shifted_vars: Vec<usize>,
    pub stable_rep: Vec<f64>,
    pub unstable_latent: LatentPoint,
    pub unstable_rep: Vec<f64>,
    /// Squared latent distance from the shifted query to the chosen neighbour.
    pub distance: f64,
}

impl UnstablePair {
    pub fn shifted_names(&self) -> Vec<&'static str> {
        self.shifted_vars.iter().map(|&v| VAR_NAMES[v]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborChoice {
    /// Lowest prediction score for the true class among the neighbours.
    Worst,
    /// Uniformly random neighbour.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetPlan {
    /// Every point is paired under all `C(8, n)` subsets.
    Enumerate,
    /// One random subset per point.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOptions {
    pub num_neighbors: usize,
    pub choice: NeighborChoice,
    pub subsets: SubsetPlan,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            num_neighbors: 5,
            choice: NeighborChoice::Worst,
            subsets: SubsetPlan::Enumerate,
        }
    }
}

/// All `k`-subsets of `items` in lexicographic order.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= items.len() {
        rec(items, k, 0, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Index of the smallest score; ties go to the earlier (nearer) neighbour.
fn argmin(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, &s)| if s < b.1 { (i, s) } else { b })
        .0
}

/// Pairs each seen point with a hold-out neighbour of its `n`-variable shift.
///
/// For subset `S` the pool is `ctx.shifted_pool(pool, S)`, so every candidate
/// lies in hold-out range on all of `S`. The seen point is shifted on `S`,
/// its `num_neighbors` class-matched nearest candidates are scored by the
/// probe, and one is kept according to `opts.choice`.
pub fn make_unstable_pairs(
    ctx: &ShiftContext<'_>,
    seen: &RepSet,
    pool: &[LatentPoint],
    n: usize,
    opts: &PairOptions,
    probe: &ProbeModel,
    rs: &RandomStream,
) -> Result<Vec<UnstablePair>> {
    if !(1..=ELIGIBLE.len()).contains(&n) {
        return Err(Error::Contract(format!("shift size {n} outside 1..={}", ELIGIBLE.len())));
    }
    if opts.num_neighbors == 0 {
        return Err(Error::Contract("need at least one neighbour".into()));
    }
    if pool.is_empty() {
        return Err(Error::Data("hold-out pool is empty".into()));
    }
    let subsets = combinations(&ELIGIBLE, n);
    let mut plan: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    match opts.subsets {
        SubsetPlan::Enumerate => {
            for s in 0..subsets.len() {
                plan.insert(s, (0..seen.len()).collect());
            }
        }
        SubsetPlan::Sample => {
            let mut pick = rs.fork(u64::MAX);
            for i in 0..seen.len() {
                plan.entry(pick.below(subsets.len())).or_default().push(i);
            }
        }
    }
    let mut pairs = Vec::new();
    for (s, points) in plan {
        let subset = &subsets[s];
        let srs = rs.fork(s as u64);
        let shifted = ctx.shifted_pool(pool, subset, &srs.fork(0))?;
        let scores = label_scores(probe, &shifted.reps, &shifted.labels())?;
        let iv = InterventionSpec::new(subset.iter().copied(), InterventionRange::Holdout)?;
        for i in points {
            let z = &seen.latents[i];
            let mut prs = srs.fork(i as u64 + 1);
            let query = do_intervene(ctx.scm, ctx.rule, z, &iv, &mut prs)?;
            let nn = nearest_neighbors(&query, &shifted.latents, opts.num_neighbors)?;
            let pick = match opts.choice {
                NeighborChoice::Worst => nn[argmin(&nn.iter().map(|&j| scores[j]).collect::<Vec<_>>())],
                NeighborChoice::Random => nn[prs.below(nn.len())],
            };
            let u = &shifted.latents[pick];
            let distance = query.vars.iter().zip(&u.vars).map(|(a, b)| (a - b).powi(2)).sum();
            pairs.push(UnstablePair {
                stable_index: i,
                class_id: z.class_id,
                shifted_vars: subset.clone(),
                stable_rep: seen.reps.row(i).to_vec(),
                unstable_latent: u.clone(),
                unstable_rep: shifted.reps.row(pick).to_vec(),
                distance,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Score,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Score => "score",
        }
    }
}

fn per_sample(probe: &ProbeModel, reps: &DenseMatrix, labels: &[usize], metric: Metric) -> Result<Vec<f64>> {
    match metric {
        Metric::Score => label_scores(probe, reps, labels),
        Metric::Accuracy => Ok(probe
            .predict(reps)?
            .iter()
            .zip(labels)
            .map(|(p, l)| f64::from(p == l))
            .collect()),
    }
}

/// Per-pair stable and unstable metric values, `(stable, unstable)`.
pub fn pair_metrics(
    stable: &DenseMatrix,
    unstable: &DenseMatrix,
    labels: &[usize],
    probe: &ProbeModel,
    metric: Metric,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        per_sample(probe, stable, labels, metric)?,
        per_sample(probe, unstable, labels, metric)?,
    ))
}

fn pair_matrices(pairs: &[UnstablePair]) -> Result<(DenseMatrix, DenseMatrix, Vec<usize>)> {
    if pairs.is_empty() {
        return Err(Error::Data("no unstable pairs".into()));
    }
    let s = DenseMatrix::from_rows(&pairs.iter().map(|p| p.stable_rep.as_slice()).collect::<Vec<_>>())?;
    let u = DenseMatrix::from_rows(&pairs.iter().map(|p| p.unstable_rep.as_slice()).collect::<Vec<_>>())?;
    Ok((s, u, pairs.iter().map(|p| p.class_id).collect()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean stable metric minus mean unstable metric.
pub fn deterioration(pairs: &[UnstablePair], probe: &ProbeModel, metric: Metric) -> Result<f64> {
    let (s, u, labels) = pair_matrices(pairs)?;
    let (ms, mu) = pair_metrics(&s, &u, &labels, probe, metric)?;
    Ok(mean(&ms) - mean(&mu))
}

/// Dimensions by descending `W[d, c] · rep[d]`, ties to the lower index.
pub fn rank_dimensions(probe: &ProbeModel, rep: &[f64], class_id: usize) -> Result<Vec<usize>> {
    if class_id >= probe.num_classes() {
        return Err(Error::Contract(format!("class {class_id} unknown to the probe")));
    }
    if rep.len() != probe.rep_dim() {
        return Err(shape_err("rank_dimensions", format!("{} vs {}", rep.len(), probe.rep_dim())));
    }
    let contrib: Vec<f64> = rep.iter().enumerate().map(|(d, r)| probe.weight[(d, class_id)] * r).collect();
    let mut idx: Vec<usize> = (0..rep.len()).collect();
    idx.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
    Ok(idx)
}

fn kept_count(dim: usize, k_percent: f64) -> Result<usize> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Contract(format!("k_percent {k_percent} outside (0, 100]")));
    }
    // guard against 90/100*10 = 9.000000000000002 rounding up
    let raw = k_percent / 100.0 * dim as f64;
    Ok(((raw - 1e-9).ceil() as usize).clamp(1, dim))
}

/// Keeps the first `ceil(k%·d)` ranked coordinates, zeroes the rest.
pub fn mask_top_k(rep: &[f64], ranking: &[usize], k_percent: f64) -> Result<Vec<f64>> {
    if ranking.len() != rep.len() {
        return Err(shape_err("mask_top_k", format!("ranking {} vs rep {}", ranking.len(), rep.len())));
    }
    let keep = kept_count(rep.len(), k_percent)?;
    let mut out = vec![0.0; rep.len()];
    for &d in &ranking[..keep] {
        out[d] = rep[d];
    }
    Ok(out)
}

/// Affine residual `l(u) = u·F + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableMap {
    pub f: DenseMatrix,
    pub bias: DenseMatrix,
    pub trained_on: String,
    pub num_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableMapTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for StableMapTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            adam: AdamConfig::default().with_lr(1e-3),
        }
    }
}

impl StableMap {
    pub fn zeros(dim: usize) -> Self {
        Self {
            f: DenseMatrix::zeros(dim, dim),
            bias: DenseMatrix::zeros(1, dim),
            trained_on: String::new(),
            num_pairs: 0,
        }
    }

    pub fn residual(&self, reps: &DenseMatrix) -> Result<DenseMatrix> {
        reps.matmul(&self.f)?.add_row_broadcast(&self.bias)
    }
}

/// Minimises mean `‖l(u) − (s − u)‖²` over `(unstable, stable)` rows by Adam,
/// starting from the zero map. Returns the map and any warnings.
pub fn fit_stable_map(
    unstable: &DenseMatrix,
    stable: &DenseMatrix,
    training: &StableMapTraining,
    rs: &RandomStream,
) -> Result<(StableMap, Vec<String>)> {
    unstable.same_shape(stable, "fit_stable_map")?;
    if unstable.rows() == 0 {
        return Err(Error::Data("stable map needs training pairs".into()));
    }
    let d = unstable.cols();
    let mut warnings = Vec::new();
    if unstable.rows() < d {
        warnings.push(format!("only {} stable-map pairs for {d} dimensions", unstable.rows()));
    }
    let target = stable.sub(unstable)?;
    let mut map = StableMap::zeros(d);
    map.num_pairs = unstable.rows();
    let mut adam = AdamState::new(training.adam.clone());
    for epoch in 0..training.epochs {
        let perm = rs.fork(epoch as u64).permutation(unstable.rows());
        for idx in perm.chunks(training.batch_size.max(1)) {
            let mut g = CompGraph::new();
            let u = g.constant(unstable.select_rows(idx));
            let t = g.constant(target.select_rows(idx));
            let f = g.param(map.f.clone());
            let b = g.param(map.bias.clone());
            let h = g.matmul(u, f)?;
            let h = g.add_bias(h, b)?;
            let diff = g.sub(h, t)?;
            let sq = g.square(diff);
            let s = g.sum(sq);
            let loss = g.scale(s, 1.0 / idx.len() as f64);
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite("stable map loss".into()));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut [&mut map.f, &mut map.bias], &[grads.wrt(f), grads.wrt(b)])?;
        }
    }
    Ok((map, warnings))
}

/// `normalize(rep + l(rep))` row-wise.
pub fn apply_stable_map(map: &StableMap, reps: &DenseMatrix) -> Result<DenseMatrix> {
    reps.add(&map.residual(reps)?)?.row_normalize()
}

/// Inference-time treatment of representations before the probe.
#[derive(Debug, Clone, Copy)]
pub enum Remedy<'a> {
    None,
    /// Top-k% dimensions by the stable rep's contribution to the true class.
    Robust { k_percent: f64 },
    StableMap(&'a StableMap),
}

impl Remedy<'_> {
    /// Method tag used in reports.
    pub fn tag(&self) -> String {
        match self {
            Remedy::None => "none".into(),
            Remedy::Robust { k_percent } => format!("robust_k{k_percent}"),
            Remedy::StableMap(_) => "stable_map".into(),
        }
    }
}

/// Per-pair metric values for both sides after applying `remedy`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemedyOutcome {
    pub stable: Vec<f64>,
    pub unstable: Vec<f64>,
}

impl RemedyOutcome {
    pub fn stable_mean(&self) -> f64 {
        mean(&self.stable)
    }

    pub fn unstable_mean(&self) -> f64 {
        mean(&self.unstable)
    }

    pub fn deterioration(&self) -> f64 {
        self.stable_mean() - self.unstable_mean()
    }
}

pub fn evaluate_remedy(pairs: &[UnstablePair], probe: &ProbeModel, remedy: Remedy<'_>, metric: Metric) -> Result<RemedyOutcome> {
    let (s, u, labels) = pair_matrices(pairs)?;
    let (s, u) = match remedy {
        Remedy::None => (s, u),
        Remedy::Robust { k_percent } => {
            let mut ms = Vec::with_capacity(pairs.len());
            let mut mu = Vec::with_capacity(pairs.len());
            for p in pairs {
                let ranking = rank_dimensions(probe, &p.stable_rep, p.class_id)?;
                ms.push(mask_top_k(&p.stable_rep, &ranking, k_percent)?);
                mu.push(mask_top_k(&p.unstable_rep, &ranking, k_percent)?);
            }
            (DenseMatrix::from_rows(&ms)?, DenseMatrix::from_rows(&mu)?)
        }
        Remedy::StableMap(map) => (apply_stable_map(map, &s)?, apply_stable_map(map, &u)?),
    };
    let (stable, unstable) = pair_metrics(&s, &u, &labels, probe, metric)?;
    Ok(RemedyOutcome { stable, unstable })
}

/// Mean paired score difference with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub ate: f64,
    pub lower: f64,
    pub upper: f64,
    pub pairs: usize,
}

/// `E[D(control) − D(treated)]` on true-class prediction scores.
pub fn ate_estimate(
    probe: &ProbeModel,
    control: &DenseMatrix,
    treated: &DenseMatrix,
    labels: &[usize],
    resamples: usize,
    rs: &RandomStream,
) -> Result<AteEstimate> {
    control.same_shape(treated, "ate_estimate")?;
    if labels.is_empty() || labels.len() != control.rows() {
        return Err(Error::Data(format!("{} labels for {} pairs", labels.len(), control.rows())));
    }
    let c = label_scores(probe, control, labels)?;
    let t = label_scores(probe, treated, labels)?;
    let diffs: Vec<f64> = c.iter().zip(&t).map(|(a, b)| a - b).collect();
    let ate = mean(&diffs);
    let mut boot = Vec::with_capacity(resamples);
    let mut brs = rs.fork(0);
    for _ in 0..resamples {
        let s: f64 = (0..diffs.len()).map(|_| diffs[brs.below(diffs.len())]).sum();
        boot.push(s / diffs.len() as f64);
    }
    boot.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if boot.is_empty() {
            ate
        } else {
            boot[((p * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)]
        }
    };
    Ok(AteEstimate {
        ate,
        lower: q(0.025),
        upper: q(0.975),
        pairs: diffs.len(),
    })
}

/// `(mean, standard error)`; the error is 0 for fewer than two values.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

/// One row of the stability report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub objective: String,
    pub geometry: String,
    pub n: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub seed: u64,
}
