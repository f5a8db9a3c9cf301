//! Structural causal model over the class and ten continuous scene variables,
//! with hold-out ranges, graph-respecting interventions and latent
//! nearest-neighbour search.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{sample_sphere_uniform, sample_truncnorm, RandomStream};

pub const NUM_VARS: usize = 10;

/// Variable order used everywhere a latent is flattened.
pub const VAR_NAMES: [&str; NUM_VARS] = [
    "pos_z", "rot_phi", "rot_theta", "rot_psi", "hue_obj", "pos_spl", "hue_spl", "hue_bg", "pos_x",
    "pos_y",
];

/// Indices of the variables that may be intervened on (object x/y position
/// is never shifted).
pub const ELIGIBLE: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];

/// Parent name standing for the discrete class.
pub const CLASS_PARENT: &str = "class";

/// Tail excluded for dependent variables, recorded in report metadata.
pub const DEPENDENT_TAIL_RULE: &str =
    "dependent variables: lower tail (<= mu - t) excluded when mu > 0, upper tail (>= mu + t) when mu <= 0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Box,
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSeen,
    TestSeen,
    TestHoldout,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::TrainSeen => "train_seen",
            Split::TestSeen => "test_seen",
            Split::TestHoldout => "test_holdout",
        }
    }
}

/// Ground-truth latent `(class, V)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub class_id: usize,
    pub vars: [f64; NUM_VARS],
    pub geometry: Geometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarKind {
    RootUniform,
    /// Truncated normal around the clamped mean of the parents' values.
    Dependent { parents: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VarKind,
}

/// Serializable description of the causal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub num_classes: usize,
    pub sigma: f64,
    /// Class `c` contributes `scale · (2c/(C−1) − 1)` to a dependent mean.
    pub class_mean_scale: f64,
    pub variables: Vec<VariableSpec>,
}

impl Default for ScmSpec {
    fn default() -> Self {
        let dep = |name: &str, parents: &[&str]| VariableSpec {
            name: name.into(),
            kind: VarKind::Dependent {
                parents: parents.iter().map(|p| (*p).to_string()).collect(),
            },
        };
        let root = |name: &str| VariableSpec {
            name: name.into(),
            kind: VarKind::RootUniform,
        };
        Self {
            num_classes: 7,
            sigma: 0.5,
            class_mean_scale: 0.6,
            variables: vec![
                dep("pos_z", &["pos_spl"]),
                dep("rot_phi", &[CLASS_PARENT]),
                dep("rot_theta", &[CLASS_PARENT]),
                dep("rot_psi", &[CLASS_PARENT]),
                dep("hue_obj", &["hue_spl", "hue_bg"]),
                root("pos_spl"),
                root("hue_spl"),
                root("hue_bg"),
                dep("pos_x", &["pos_spl"]),
                dep("pos_y", &["pos_spl"]),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParentRef {
    Class,
    Var(usize),
}

/// Validated model: resolved parents and a topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    spec: ScmSpec,
    parents: Vec<Option<Vec<ParentRef>>>,
    order: Vec<usize>,
}

impl Scm {
    pub fn new(spec: ScmSpec) -> Result<Self> {
        if spec.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(spec.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", spec.sigma)));
        }
        if spec.variables.len() != NUM_VARS {
            return Err(Error::Config(format!(
                "expected {NUM_VARS} variables, got {}",
                spec.variables.len()
            )));
        }
        for (v, name) in spec.variables.iter().zip(VAR_NAMES) {
            if v.name != name {
                return Err(Error::Config(format!(
                    "variable order must be {VAR_NAMES:?}; found {} where {name} belongs",
                    v.name
                )));
            }
        }
        let mut parents = Vec::with_capacity(NUM_VARS);
        for v in &spec.variables {
            parents.push(match &v.kind {
                VarKind::RootUniform => None,
                VarKind::Dependent { parents: ps } => {
                    if ps.is_empty() {
                        return Err(Error::Config(format!("{} is dependent but has no parents", v.name)));
                    }
                    let mut refs = Vec::with_capacity(ps.len());
                    for p in ps {
                        if p == CLASS_PARENT {
                            refs.push(ParentRef::Class);
                        } else {
                            let idx = VAR_NAMES.iter().position(|n| n == p).ok_or_else(|| {
                                Error::Config(format!("{} has unknown parent {p}", v.name))
                            })?;
                            refs.push(ParentRef::Var(idx));
                        }
                    }
                    Some(refs)
                }
            });
        }
        let order = topological_order(&parents)?;
        Ok(Self {
            spec,
            parents,
            order,
        })
    }

    pub fn spec(&self) -> &ScmSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn is_root(&self, var: usize) -> bool {
        self.parents[var].is_none()
    }

    /// Variables in an order where parents precede children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn var_parents(&self, var: usize) -> Vec<usize> {
        self.parents[var]
            .iter()
            .flatten()
            .filter_map(|p| match p {
                ParentRef::Var(i) => Some(*i),
                ParentRef::Class => None,
            })
            .collect()
    }

    pub fn children(&self, var: usize) -> Vec<usize> {
        (0..NUM_VARS)
            .filter(|&c| self.var_parents(c).contains(&var))
            .collect()
    }

    fn class_level(&self, class_id: usize) -> f64 {
        let c = self.spec.num_classes;
        if c < 2 {
            0.0
        } else {
            self.spec.class_mean_scale * (2.0 * class_id as f64 / (c - 1) as f64 - 1.0)
        }
    }

    /// Conditional mean of a dependent variable; `None` for roots.
    pub fn mean(&self, var: usize, class_id: usize, vars: &[f64; NUM_VARS]) -> Option<f64> {
        let ps = self.parents[var].as_ref()?;
        let total: f64 = ps
            .iter()
            .map(|p| match p {
                ParentRef::Class => self.class_level(class_id),
                ParentRef::Var(i) => vars[*i],
            })
            .sum();
        Some((total / ps.len() as f64).clamp(-1.0, 1.0))
    }
}

fn topological_order(parents: &[Option<Vec<ParentRef>>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    while order.len() < n {
        let before = order.len();
        for v in 0..n {
            if placed[v] {
                continue;
            }
            let ready = parents[v].iter().flatten().all(|p| match p {
                ParentRef::Class => true,
                ParentRef::Var(i) => placed[*i],
            });
            if ready {
                placed[v] = true;
                order.push(v);
            }
        }
        if order.len() == before {
            let stuck: Vec<&str> = (0..n).filter(|v| !placed[*v]).map(|v| VAR_NAMES[v]).collect();
            return Err(Error::Config(format!("dependency cycle among {stuck:?}")));
        }
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutMode {
    UniformEdges,
    DependentTail,
}

/// Which value ranges are withheld from training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRule {
    pub threshold: f64,
    pub modes: Vec<HoldoutMode>,
}

impl HoldoutRule {
    pub fn new(scm: &Scm, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("hold-out threshold {threshold} not in (0, 1)")));
        }
        let modes = (0..NUM_VARS)
            .map(|v| {
                if scm.is_root(v) {
                    HoldoutMode::UniformEdges
                } else {
                    HoldoutMode::DependentTail
                }
            })
            .collect();
        Ok(Self { threshold, modes })
    }

    /// Allowed training interval for a variable with conditional mean `mu`.
    pub fn seen_range(&self, var: usize, mu: Option<f64>) -> (f64, f64) {
        let t = self.threshold;
        match (self.modes[var], mu) {
            (HoldoutMode::UniformEdges, _) | (HoldoutMode::DependentTail, None) => (-t, t),
            (HoldoutMode::DependentTail, Some(m)) if m > 0.0 => (m - t, 1.0),
            (HoldoutMode::DependentTail, Some(m)) => (-1.0, m + t),
        }
    }

    /// Withheld intervals (one or two) inside `[−1, 1]`.
    pub fn holdout_ranges(&self, var: usize, mu: Option<f64>) -> Vec<(f64, f64)> {
        let t = self.threshold;
        match (self.modes[var], mu) {
            (HoldoutMode::UniformEdges, _) | (HoldoutMode::DependentTail, None) => {
                vec![(-1.0, -t), (t, 1.0)]
            }
            (HoldoutMode::DependentTail, Some(m)) if m > 0.0 => vec![(-1.0, m - t)],
            (HoldoutMode::DependentTail, Some(m)) => vec![(m + t, 1.0)],
        }
    }

    pub fn in_holdout(&self, var: usize, value: f64, mu: Option<f64>) -> bool {
        let t = self.threshold;
        match (self.modes[var], mu) {
            (HoldoutMode::UniformEdges, _) | (HoldoutMode::DependentTail, None) => value.abs() >= t,
            (HoldoutMode::DependentTail, Some(m)) if m > 0.0 => value <= m - t,
            (HoldoutMode::DependentTail, Some(m)) => value >= m + t,
        }
    }

    /// Per-variable hold-out membership of a box latent.
    pub fn holdout_flags(&self, scm: &Scm, z: &LatentPoint) -> [bool; NUM_VARS] {
        let mut flags = [false; NUM_VARS];
        for (v, f) in flags.iter_mut().enumerate() {
            *f = self.in_holdout(v, z.vars[v], scm.mean(v, z.class_id, &z.vars));
        }
        flags
    }
}

fn uniform_on(ranges: &[(f64, f64)], rs: &mut RandomStream) -> f64 {
    let total: f64 = ranges.iter().map(|(a, b)| b - a).sum();
    let mut u = rs.uniform(0.0, total);
    for &(a, b) in ranges {
        if u < b - a {
            return a + u;
        }
        u -= b - a;
    }
    ranges.last().map_or(0.0, |r| r.1)
}

fn draw_conditional(
    scm: &Scm,
    var: usize,
    mu: Option<f64>,
    ranges: &[(f64, f64)],
    rs: &mut RandomStream,
) -> Result<f64> {
    match mu {
        None => Ok(uniform_on(ranges, rs)),
        Some(m) => {
            let (lo, hi) = ranges[0];
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "allowed range for {} is empty: [{lo}, {hi}]",
                    VAR_NAMES[var]
                )));
            }
            sample_truncnorm(m, scm.spec.sigma, lo, hi, rs)
        }
    }
}

/// Ancestral draw of one latent for `split`.
///
/// Seen splits restrict every variable to its seen range; the hold-out split
/// samples the full model and keeps only draws with at least one variable in
/// its hold-out range. Sphere geometry ignores the split and draws the ten
/// variables uniformly on `S⁹`.
pub fn sample_latent(
    scm: &Scm,
    rule: &HoldoutRule,
    geometry: Geometry,
    split: Split,
    rs: &mut RandomStream,
) -> Result<LatentPoint> {
    let class_id = rs.below(scm.num_classes());
    if geometry == Geometry::Sphere {
        let v = sample_sphere_uniform(NUM_VARS, rs)?;
        let mut vars = [0.0; NUM_VARS];
        vars.copy_from_slice(&v);
        return Ok(LatentPoint {
            class_id,
            vars,
            geometry,
        });
    }
    loop {
        let mut vars = [0.0; NUM_VARS];
        for &v in scm.order() {
            let mu = scm.mean(v, class_id, &vars);
            let range = match split {
                Split::TrainSeen | Split::TestSeen => rule.seen_range(v, mu),
                Split::TestHoldout => (-1.0, 1.0),
            };
            vars[v] = draw_conditional(scm, v, mu, &[range], rs)?;
        }
        let z = LatentPoint {
            class_id,
            vars,
            geometry,
        };
        if split != Split::TestHoldout || rule.holdout_flags(scm, &z).iter().any(|&f| f) {
            return Ok(z);
        }
    }
}

/// `n` latents, sample `i` drawn from `rs.fork(i)`.
pub fn sample_dataset(
    scm: &Scm,
    rule: &HoldoutRule,
    geometry: Geometry,
    split: Split,
    n: usize,
    rs: &RandomStream,
) -> Result<Vec<LatentPoint>> {
    (0..n)
        .map(|i| sample_latent(scm, rule, geometry, split, &mut rs.fork(i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionRange {
    /// Fresh values from the withheld ranges.
    Holdout,
    /// Fresh values from the training ranges (no-shift control).
    Seen,
}

/// `do(V_i = v_i)` over a subset of the eligible variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub targets: BTreeSet<usize>,
    pub range: InterventionRange,
}

impl InterventionSpec {
    pub fn new(targets: impl IntoIterator<Item = usize>, range: InterventionRange) -> Result<Self> {
        let targets: BTreeSet<usize> = targets.into_iter().collect();
        for &t in &targets {
            if !ELIGIBLE.contains(&t) {
                return Err(Error::Contract(format!(
                    "{} is not intervention-eligible",
                    VAR_NAMES.get(t).copied().unwrap_or("<out of range>")
                )));
            }
        }
        Ok(Self { targets, range })
    }

    pub fn from_names(names: &[&str], range: InterventionRange) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                VAR_NAMES
                    .iter()
                    .position(|v| v == n)
                    .ok_or_else(|| Error::Contract(format!("unknown variable {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(idx, range)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Graph-respecting intervention: targets get fresh draws from the requested
/// range, descendants are redrawn from their seen-range conditionals given
/// the new parents, everything else (and the class) is kept.
pub fn do_intervene(
    scm: &Scm,
    rule: &HoldoutRule,
    z: &LatentPoint,
    iv: &InterventionSpec,
    rs: &mut RandomStream,
) -> Result<LatentPoint> {
    if z.geometry != Geometry::Box {
        return Err(Error::Contract("interventions are defined for box latents only".into()));
    }
    let mut out = z.clone();
    let mut changed = [false; NUM_VARS];
    for &v in scm.order() {
        let mu = scm.mean(v, out.class_id, &out.vars);
        if iv.targets.contains(&v) {
            let ranges = match iv.range {
                InterventionRange::Holdout => rule.holdout_ranges(v, mu),
                InterventionRange::Seen => vec![rule.seen_range(v, mu)],
            };
            out.vars[v] = draw_conditional(scm, v, mu, &ranges, rs)?;
            changed[v] = true;
        } else if scm.var_parents(v).iter().any(|&p| changed[p]) {
            out.vars[v] = draw_conditional(scm, v, mu, &[rule.seen_range(v, mu)], rs)?;
            changed[v] = true;
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64; NUM_VARS], b: &[f64; NUM_VARS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Indices of the `k` class-matched pool points closest to `query` in
/// Euclidean distance over the variables, ascending, ties by index.
pub fn nearest_neighbors(query: &LatentPoint, pool: &[LatentPoint], k: usize) -> Result<Vec<usize>> {
    let mut cands: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .filter(|(_, p)| p.class_id == query.class_id)
        .map(|(i, p)| (sq_dist(&query.vars, &p.vars), i))
        .collect();
    if cands.is_empty() {
        return Err(Error::Data(format!(
            "no pool point with class {}",
            query.class_id
        )));
    }
    if k > cands.len() {
        return Err(Error::Data(format!(
            "asked for {k} neighbours but class {} has {} pool points",
            query.class_id,
            cands.len()
        )));
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cands.len() {
        cands.select_nth_unstable_by(k, cmp);
        cands.truncate(k);
    }
    cands.sort_by(cmp);
    Ok(cands.into_iter().map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Scm, HoldoutRule) {
        let scm = Scm::new(ScmSpec::default()).unwrap();
        let rule = HoldoutRule::new(&scm, 0.8).unwrap();
        (scm, rule)
    }

    fn idx(name: &str) -> usize {
        VAR_NAMES.iter().position(|v| *v == name).unwrap()
    }

    #[test]
    fn default_graph_shape() {
        let (scm, _) = setup();
        let roots: Vec<&str> = (0..NUM_VARS).filter(|&v| scm.is_root(v)).map(|v| VAR_NAMES[v]).collect();
        assert_eq!(roots, ["pos_spl", "hue_spl", "hue_bg"]);
        // five intervention-eligible children
        let children = ELIGIBLE.iter().filter(|&&v| !scm.is_root(v)).count();
        assert_eq!(children, 5);
        let pos = scm.order().iter().position(|&v| v == idx("pos_spl")).unwrap();
        let child = scm.order().iter().position(|&v| v == idx("pos_z")).unwrap();
        assert!(pos < child);
    }

    #[test]
    fn cycle_rejected() {
        let mut spec = ScmSpec::default();
        spec.variables[idx("pos_spl")].kind = VarKind::Dependent {
            parents: vec!["pos_z".into()],
        };
        assert!(matches!(Scm::new(spec), Err(Error::Config(m)) if m.contains("cycle")));
    }

    #[test]
    fn unknown_parent_rejected() {
        let mut spec = ScmSpec::default();
        spec.variables[0].kind = VarKind::Dependent {
            parents: vec!["nope".into()],
        };
        assert!(Scm::new(spec).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = ScmSpec::default();
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"kind\":{\"type\":\"root_uniform\"}"));
        let back: ScmSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn train_roots_stay_inside_threshold() {
        let (scm, rule) = setup();
        let rs = RandomStream::new(1, 0);
        for z in sample_dataset(&scm, &rule, Geometry::Box, Split::TrainSeen, 5000, &rs).unwrap() {
            for v in 0..NUM_VARS {
                if scm.is_root(v) {
                    assert!(z.vars[v] > -0.8 && z.vars[v] < 0.8);
                }
            }
            assert!(!rule.holdout_flags(&scm, &z).iter().any(|&f| f));
        }
    }

    #[test]
    fn dependent_tail_rule() {
        let (_, rule) = setup();
        let v = idx("hue_obj");
        // mu = 0.5 > 0: lower tail excluded
        assert_eq!(rule.seen_range(v, Some(0.5)), (0.5 - 0.8, 1.0));
        assert!(rule.in_holdout(v, -0.31, Some(0.5)));
        assert!(!rule.in_holdout(v, 0.95, Some(0.5)));
        // mu = 0: upper tail excluded
        assert!(rule.in_holdout(v, 0.85, Some(0.0)));
        assert!(!rule.in_holdout(v, -0.95, Some(0.0)));
    }

    #[test]
    fn holdout_split_contains_holdout_value() {
        let (scm, rule) = setup();
        let rs = RandomStream::new(2, 0);
        for z in sample_dataset(&scm, &rule, Geometry::Box, Split::TestHoldout, 2000, &rs).unwrap() {
            assert!(rule.holdout_flags(&scm, &z).iter().any(|&f| f));
        }
    }

    #[test]
    fn empty_intervention_is_identity() {
        let (scm, rule) = setup();
        let mut rs = RandomStream::new(3, 0);
        let z = sample_latent(&scm, &rule, Geometry::Box, Split::TestSeen, &mut rs).unwrap();
        let iv = InterventionSpec::new([], InterventionRange::Holdout).unwrap();
        assert_eq!(do_intervene(&scm, &rule, &z, &iv, &mut rs).unwrap(), z);
    }

    #[test]
    fn leaf_intervention_changes_one_coordinate() {
        let (scm, rule) = setup();
        let mut rs = RandomStream::new(4, 0);
        for _ in 0..200 {
            let z = sample_latent(&scm, &rule, Geometry::Box, Split::TestSeen, &mut rs).unwrap();
            let iv = InterventionSpec::from_names(&["rot_theta"], InterventionRange::Holdout).unwrap();
            let out = do_intervene(&scm, &rule, &z, &iv, &mut rs).unwrap();
            let changed: Vec<usize> = (0..NUM_VARS).filter(|&v| out.vars[v] != z.vars[v]).collect();
            assert_eq!(changed, vec![idx("rot_theta")]);
            assert_eq!(out.class_id, z.class_id);
            assert!(rule.holdout_flags(&scm, &out)[idx("rot_theta")]);
        }
    }

    #[test]
    fn parent_intervention_redraws_children_only() {
        let (scm, rule) = setup();
        let mut rs = RandomStream::new(5, 0);
        let z = sample_latent(&scm, &rule, Geometry::Box, Split::TestSeen, &mut rs).unwrap();
        let iv = InterventionSpec::from_names(&["pos_spl"], InterventionRange::Holdout).unwrap();
        let out = do_intervene(&scm, &rule, &z, &iv, &mut rs).unwrap();
        for v in 0..NUM_VARS {
            let affected = ["pos_spl", "pos_z", "pos_x", "pos_y"].contains(&VAR_NAMES[v]);
            if !affected {
                assert_eq!(out.vars[v], z.vars[v], "{}", VAR_NAMES[v]);
            }
        }
        assert!(out.vars[idx("pos_spl")].abs() >= 0.8);
    }

    #[test]
    fn ineligible_target_rejected() {
        assert!(matches!(
            InterventionSpec::from_names(&["pos_x"], InterventionRange::Holdout),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn neighbours_hand_ranking() {
        let mk = |c: usize, x: f64| LatentPoint {
            class_id: c,
            vars: [x, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            geometry: Geometry::Box,
        };
        let pool = vec![mk(0, 0.9), mk(1, 0.0), mk(0, 0.1), mk(0, -0.3)];
        let q = mk(0, 0.0);
        assert_eq!(nearest_neighbors(&q, &pool, 3).unwrap(), vec![2, 3, 0]);
        // query itself in pool comes first
        let mut pool2 = pool.clone();
        pool2.push(q.clone());
        assert_eq!(nearest_neighbors(&q, &pool2, 1).unwrap(), vec![4]);
        // ties broken by index
        let tie = vec![mk(0, 0.5), mk(0, -0.5)];
        assert_eq!(nearest_neighbors(&q, &tie, 2).unwrap(), vec![0, 1]);
        assert!(nearest_neighbors(&mk(5, 0.0), &pool, 1).is_err());
        assert!(nearest_neighbors(&q, &pool, 4).is_err());
    }
}
