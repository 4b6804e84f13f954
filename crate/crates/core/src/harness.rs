//! Experiment runner: configuration, result tables, and the files a run
//! leaves behind (`results.csv`, `report.json`, `manifest.json`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::grid::QuadGrid;
use crate::measures::{
    check_membership, distance, rel_entropy_discrete, CandidatePair, Membership,
};
use crate::model::{validate_model, Model, ModelConfig};
use crate::rate::{rate_I_with_tol, rate_I1_with, rate_Ihh, I1Options, TestPair};
use crate::simulate::{empirical_pair, rng_for, simulate_with, SimRng};
use crate::tilt::{
    crude_probability, estimate_probability_with, log_likelihood_ratio, tilt_from_pair, BallEvent,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Lln,
    Decay,
    Contraction,
    Legendre,
    Invariants,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Lln => "lln",
            ExperimentKind::Decay => "decay",
            ExperimentKind::Contraction => "contraction",
            ExperimentKind::Legendre => "legendre",
            ExperimentKind::Invariants => "invariants",
        }
    }

    pub fn default_schedule(self) -> Vec<f64> {
        match self {
            ExperimentKind::Lln => vec![1e2, 1e3, 1e4],
            ExperimentKind::Decay => vec![50.0, 100.0, 200.0],
            _ => Vec::new(),
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lln" => ExperimentKind::Lln,
            "decay" => ExperimentKind::Decay,
            "contraction" => ExperimentKind::Contraction,
            "legendre" => ExperimentKind::Legendre,
            "invariants" => ExperimentKind::Invariants,
            _ => return Err(Error::Config(format!("kind: unknown experiment '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative balance tolerance for constraint-set membership.
    pub membership: f64,
    /// Values below this count as zeros of a rate function.
    pub zero: f64,
    /// Allowed excess of `I_{h,H}` over `I`.
    pub domination: f64,
    /// Relative agreement of the two likelihood-ratio routes.
    pub lr_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { membership: 1e-7, zero: 1e-6, domination: 1e-6, lr_relative: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub radius: f64,
    /// Extra radii for the monotonicity check.
    pub radii: Vec<f64>,
    /// Kernel whose LLN pair is the target; the base LLN pair when absent.
    pub target_kernel: Option<Vec<Vec<f64>>>,
    /// Tilt only the first `(1 + delta) Z t` steps.
    pub hybrid: Option<f64>,
    /// Plain Monte Carlo trajectories for a cross-check at `crude_t` (0 disables).
    pub crude_n: usize,
    pub crude_t: Option<f64>,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig { radius: 0.1, radii: Vec::new(), target_kernel: None, hybrid: None, crude_n: 0, crude_t: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionConfig {
    /// Simplex grid spacing.
    pub resolution: f64,
    /// Compare against a nested grid over `zeta` (two states only).
    pub oracle: bool,
    pub oracle_points: usize,
    pub restarts: usize,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig { resolution: 0.01, oracle: true, oracle_points: 200, restarts: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LegendreConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_points: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub m_points: usize,
}

impl Default for LegendreConfig {
    fn default() -> Self {
        LegendreConfig { theta_min: -5.0, theta_max: 5.0, theta_points: 101, m_min: 0.05, m_max: 10.0, m_points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantsConfig {
    pub trajectories: usize,
    pub horizon: f64,
    pub pairs: usize,
    pub members: usize,
    pub entropy_instances: usize,
    pub lr_trajectories: usize,
    /// Further models checked alongside the main one.
    pub models: Vec<PathBuf>,
    /// A candidate pair (JSON) fed to the rate functional.
    pub candidate: Option<PathBuf>,
}

impl Default for InvariantsConfig {
    fn default() -> Self {
        InvariantsConfig {
            trajectories: 1000,
            horizon: 50.0,
            pairs: 10,
            members: 50,
            entropy_instances: 1000,
            lr_trajectories: 100,
            models: Vec::new(),
            candidate: None,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_n() -> usize {
    10_000
}

/// One experiment run, as read from TOML. Relative paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    pub model: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Horizons `t`; defaults depend on the experiment.
    #[serde(default)]
    pub schedule: Vec<f64>,
    /// Trajectories per estimate.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub contraction: ContractionConfig,
    #[serde(default)]
    pub legendre: LegendreConfig,
    #[serde(default)]
    pub invariants: InvariantsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.model);
        if let Some(o) = cfg.out.as_mut() {
            resolve(o);
        }
        cfg.invariants.models.iter_mut().for_each(resolve);
        if let Some(c) = cfg.invariants.candidate.as_mut() {
            resolve(c);
        }
        Ok(cfg)
    }

    /// Reads a config file; returns it with its raw text for hashing.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let cfg = ExperimentConfig::from_toml_str(&text, base)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    /// Schedule in effect for `kind`.
    pub fn schedule_for(&self, kind: ExperimentKind) -> Vec<f64> {
        if self.schedule.is_empty() {
            kind.default_schedule()
        } else {
            self.schedule.clone()
        }
    }

    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(k) = self.kind {
            if k != kind {
                return bad(format!("kind: config is for '{}', not '{}'", k.name(), kind.name()));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds: seeds must be distinct".into());
        }
        let sched = self.schedule_for(kind);
        if matches!(kind, ExperimentKind::Lln | ExperimentKind::Decay) && sched.is_empty() {
            return bad("schedule: must be non-empty".into());
        }
        if sched.iter().any(|t| !(t.is_finite() && *t > 0.0)) || sched.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("schedule: horizons must be positive and strictly increasing".into());
        }
        if self.n < 2 {
            return bad("n: need at least 2 trajectories".into());
        }
        let d = &self.decay;
        if !(d.radius > 0.0) || d.radii.iter().any(|r| !(*r > 0.0)) {
            return bad("decay.radius: radii must be positive".into());
        }
        if matches!(d.hybrid, Some(h) if !(h >= 0.0)) {
            return bad("decay.hybrid: delta must be >= 0".into());
        }
        let c = &self.contraction;
        if !(c.resolution > 0.0 && c.resolution <= 0.5) || c.oracle_points < 2 {
            return bad("contraction: resolution must lie in ]0, 0.5] and oracle_points >= 2".into());
        }
        let l = &self.legendre;
        if !(l.theta_min < l.theta_max && l.m_min > 0.0 && l.m_min < l.m_max && l.theta_points >= 3 && l.m_points >= 3)
        {
            return bad("legendre: grids must be increasing with at least 3 points and m_min > 0".into());
        }
        let iv = &self.invariants;
        if !(iv.horizon > 0.0 && iv.horizon.is_finite()) {
            return bad("invariants.horizon: must be positive".into());
        }
        Ok(())
    }

    pub fn load_model(&self) -> Result<Model> {
        Model::load(&self.model)
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: String,
    /// `key=value` pairs joined by `;`.
    pub params: String,
    pub measured: f64,
    pub reference: Option<f64>,
    /// `measured - reference`.
    pub deviation: Option<f64>,
    pub ci: Option<f64>,
}

impl ResultRow {
    pub fn new(kind: ExperimentKind, params: String, measured: f64, reference: Option<f64>, ci: Option<f64>) -> Self {
        ResultRow {
            kind: kind.name().to_string(),
            params,
            measured,
            reference,
            deviation: reference.map(|r| measured - r),
            ci,
        }
    }

    /// Value of `key` in `params`.
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.split(';').find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
    }
}

/// A failed property, with what is needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub module: String,
    pub property: String,
    pub seed: Option<u64>,
    pub detail: String,
}

impl Failure {
    fn new(module: &str, property: &str, seed: Option<u64>, detail: String) -> Self {
        Failure { module: module.into(), property: property.into(), seed, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub rows: Vec<ResultRow>,
    pub summary: Value,
    pub failures: Vec<Failure>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// What is needed to rerun an experiment and get the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub version: String,
    pub config_sha256: String,
    pub model_sha256: String,
    pub seeds: Vec<u64>,
    pub rng: String,
    pub config: String,
    pub model: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Runs one experiment kind.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate(kind)?;
    match kind {
        ExperimentKind::Lln => run_lln(cfg),
        ExperimentKind::Decay => run_decay(cfg),
        ExperimentKind::Contraction => run_contraction(cfg),
        ExperimentKind::Legendre => run_legendre(cfg),
        ExperimentKind::Invariants => run_invariants(cfg),
    }
}

/// Runs and writes `results.csv`, `report.json` and `manifest.json` to `out`.
pub fn execute(kind: ExperimentKind, cfg: &ExperimentConfig, config_text: &str, out: &Path) -> Result<ExperimentOutput> {
    let output = run(kind, cfg)?;
    let model_text = fs::read_to_string(&cfg.model).unwrap_or_default();
    fs::create_dir_all(out)?;
    write_csv(&out.join("results.csv"), &output.rows)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&output)?)?;
    let manifest = Manifest {
        kind,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        model_sha256: sha256_hex(model_text.as_bytes()),
        seeds: cfg.seeds.clone(),
        rng: "ChaCha8, seed_from_u64(seed), stream i for trajectory i".into(),
        config: config_text.to_string(),
        model: model_text,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(output)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Distances of empirical pairs to the LLN limit over a schedule of
/// horizons, with flow and jump-rate deviations.
pub fn run_lln(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let kind = ExperimentKind::Lln;
    let model = cfg.load_model()?;
    let lln = CandidatePair::lln(&model, &QuadGrid::for_model(&model))?;
    let e = model.mean_cycle()?;
    let n = model.n();
    let sched = cfg.schedule_for(kind);
    let cells: Vec<(f64, u64)> = sched.iter().flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s))).collect();
    let results: Vec<Result<(f64, f64, f64)>> = cells
        .par_iter()
        .map(|&(t, seed)| {
            let tr = simulate_with(&model, t, &mut rng_for(seed, 0))?;
            let emp = empirical_pair(&tr, n);
            let d = distance(&emp, &lln);
            let mut flow_dev: f64 = 0.0;
            for x in 0..n {
                for y in 0..n {
                    flow_dev = flow_dev.max((emp.flow[x][y] - lln.flow[x][y]).abs());
                }
            }
            Ok((d, flow_dev, tr.n_jumps as f64 / t))
        })
        .collect();
    let mut rows = Vec::new();
    let mut by_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut rate_sum = vec![0.0; sched.len()];
    let mut flow_max = vec![0.0f64; sched.len()];
    for (i, ((t, seed), r)) in cells.iter().zip(results).enumerate() {
        let (d, fd, rate) = r?;
        let p = |m: &str| format!("metric={m};t={t};seed={seed}");
        rows.push(ResultRow::new(kind, p("distance"), d, Some(0.0), None));
        rows.push(ResultRow::new(kind, p("flow_deviation"), fd, Some(0.0), None));
        rows.push(ResultRow::new(kind, p("jump_rate"), rate, Some(1.0 / e), None));
        let ti = i / cfg.seeds.len();
        by_t.entry(ti).or_default().push(d);
        rate_sum[ti] += rate;
        flow_max[ti] = flow_max[ti].max(fd);
    }
    let mut medians = Vec::new();
    for (i, mut ds) in by_t {
        let m = median(&mut ds);
        rows.push(ResultRow::new(kind, format!("metric=median_distance;t={}", sched[i]), m, Some(0.0), None));
        medians.push(m);
    }
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let mut failures = Vec::new();
    if !decreasing {
        failures.push(Failure::new("harness", "lln medians decrease", cfg.seeds.first().copied(), format!("{medians:?}")));
    }
    let summary = json!({
        "schedule": sched,
        "median_distance": medians,
        "strictly_decreasing": decreasing,
        "mean_cycle": e,
        "mean_jump_rate": rate_sum.iter().map(|s| s / cfg.seeds.len() as f64).collect::<Vec<_>>(),
        "max_flow_deviation": flow_max,
        "lln_flow": lln.flow,
    });
    Ok(ExperimentOutput { kind, rows, summary, failures })
}

/// The target pair of a decay experiment.
pub fn decay_target(model: &Model, cfg: &DecayConfig) -> Result<CandidatePair> {
    let grid = QuadGrid::for_model(model);
    match &cfg.target_kernel {
        Some(k) => {
            let ones: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![1.0; g.len()]).collect();
            CandidatePair::from_kernel_and_tilts(&grid, k, &ones)
                .map_err(|e| Error::Config(format!("decay.target_kernel: {e}")))
        }
        None => CandidatePair::lln(model, &grid),
    }
}

/// An upper bound on the infimum of `rate_I` over the ball of radius `r`
/// around `target`: the rate at the point where the segment from `target`
/// to the LLN pair leaves the ball.
pub fn ball_rate_bound(model: &Model, target: &CandidatePair, r: f64, tol: f64) -> Result<f64> {
    let lln = CandidatePair::lln(model, &target.grid)?;
    let d = distance(&lln, target);
    if d <= r {
        return Ok(0.0);
    }
    let edge = target.mix(&lln, 1.0 - r / d)?;
    Ok(rate_I_with_tol(model, &edge, tol)?.value)
}

/// Importance-sampling estimates of `P(distance(mu_t, Q_t; target) < r)`
/// and the implied decay rates `-log P / t`.
pub fn run_decay(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let kind = ExperimentKind::Decay;
    let model = cfg.load_model()?;
    let target = decay_target(&model, &cfg.decay)?;
    let rate = rate_I_with_tol(&model, &target, cfg.tolerances.membership)?.value;
    let tilted = tilt_from_pair(&model, &target)?;
    let sched = cfg.schedule_for(kind);
    let mut radii = vec![cfg.decay.radius];
    radii.extend(cfg.decay.radii.iter().copied().filter(|r| *r != cfg.decay.radius));
    radii.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::new();
    let mut medians: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut bounds: BTreeMap<String, f64> = BTreeMap::new();
    for &r in &radii {
        let bound = ball_rate_bound(&model, &target, r, cfg.tolerances.membership)?;
        bounds.insert(format!("{r}"), bound);
        rows.push(ResultRow::new(kind, format!("metric=ball_rate_bound;radius={r}"), bound, Some(rate), None));
        let ball = BallEvent::new(&target, r);
        let event = |e: &crate::simulate::EmpiricalPair| ball.contains(e);
        let mut per_t = Vec::new();
        for &t in &sched {
            let mut rates = Vec::new();
            for &seed in &cfg.seeds {
                let est = estimate_probability_with(&model, &tilted, &event, t, cfg.n, seed, cfg.decay.hybrid)?;
                let p = |m: &str| format!("metric={m};radius={r};t={t};seed={seed}");
                rows.push(ResultRow::new(kind, p("probability"), est.estimate, None, Some(est.ci)));
                rows.push(ResultRow::new(kind, p("rate"), est.rate_estimate, Some(rate), Some(est.rel_ci / t)));
                rates.push(est.rate_estimate);
            }
            let m = median(&mut rates);
            rows.push(ResultRow::new(kind, format!("metric=median_rate;radius={r};t={t}"), m, Some(rate), None));
            per_t.push(m);
        }
        medians.insert(format!("{r}"), per_t);
    }
    // Smaller balls are rarer: the median rate at the last horizon must grow as r shrinks.
    let last: Vec<f64> = radii.iter().map(|r| *medians[&format!("{r}")].last().unwrap()).collect();
    let monotone = last.windows(2).all(|w| w[1] >= w[0]);
    let mut failures = Vec::new();
    if radii.len() > 1 && !monotone {
        failures.push(Failure::new("harness", "decay rate grows as the radius shrinks", None, format!("{last:?}")));
    }
    let mut crude = Value::Null;
    if cfg.decay.crude_n > 0 {
        let t = cfg.decay.crude_t.unwrap_or(sched[0]);
        let ball = BallEvent::new(&target, cfg.decay.radius);
        let event = |e: &crate::simulate::EmpiricalPair| ball.contains(e);
        let seed = cfg.seeds[0];
        let c = crude_probability(&model, &event, t, cfg.decay.crude_n, seed)?;
        let is = estimate_probability_with(&model, &tilted, &event, t, cfg.n, seed, cfg.decay.hybrid)?;
        let half = (c.ci * c.ci + is.ci * is.ci).sqrt();
        let consistent = (c.estimate - is.estimate).abs() <= 3.0 * half;
        rows.push(ResultRow::new(kind, format!("metric=crude_probability;t={t};seed={seed}"), c.estimate, None, Some(c.ci)));
        rows.push(ResultRow::new(
            kind,
            format!("metric=is_vs_crude;t={t};seed={seed}"),
            is.estimate,
            Some(c.estimate),
            Some(half),
        ));
        if !consistent {
            failures.push(Failure::new(
                "tilt",
                "importance sampling agrees with plain Monte Carlo",
                Some(seed),
                format!("IS {} vs crude {} (combined half-width {half})", is.estimate, c.estimate),
            ));
        }
        crude = json!({ "t": t, "crude": c, "importance": is, "consistent": consistent });
    }
    let summary = json!({
        "rate_at_target": rate,
        "radii": radii,
        "schedule": sched,
        "median_rate": medians,
        "monotone_in_radius": monotone,
        "crude_check": crude,
        "ball_rate_bound": bounds,
        "note": "the reference is the rate at the ball centre; ball_rate_bound bounds the infimum over the ball from above",
    });
    Ok(ExperimentOutput { kind, rows, summary, failures })
}

fn simplex_points(n: usize, resolution: f64) -> Result<Vec<Vec<f64>>> {
    let k = (1.0 / resolution).round() as usize;
    fn rec(n: usize, left: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == n - 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / k as f64).collect());
            cur.pop();
            return;
        }
        for i in (0..=left).rev() {
            cur.push(i);
            rec(n, left - i, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, k, &mut Vec::new(), &mut out);
    if out.len() > 20_000 {
        return Err(Error::Config(format!("contraction.resolution: {} simplex points is too many", out.len())));
    }
    Ok(out)
}

/// `I_DV` on two states in closed form (the stationarity condition in
/// `s = u_b / u_a` is a quadratic).
fn dv_two_state(p: [[f64; 2]; 2], za: f64, zb: f64) -> f64 {
    let only = |z: f64, stay: f64| if z == 0.0 { 0.0 } else if stay > 0.0 { -z * stay.ln() } else { f64::INFINITY };
    if za == 0.0 {
        return only(zb, p[1][1]);
    }
    if zb == 0.0 {
        return only(za, p[0][0]);
    }
    let f = |s: f64| -za * (p[0][0] + p[0][1] * s).ln() + zb * (s.ln() - (p[1][0] + p[1][1] * s).ln());
    let a = za * p[0][1] * p[1][1];
    let b = p[0][1] * p[1][0] * (za - zb);
    let c = -zb * p[1][0] * p[0][0];
    let s = if a > 0.0 {
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    } else if b > 0.0 {
        -c / b
    } else {
        f64::INFINITY
    };
    if s.is_finite() && s > 0.0 {
        f(s).max(0.0)
    } else {
        // Supremum approached at the boundary: scan in log s.
        let v = (-60..=60).map(|i| f((i as f64 * 0.5).exp())).fold(f64::NEG_INFINITY, f64::max);
        if v > 20.0 {
            f64::INFINITY
        } else {
            v.max(0.0)
        }
    }
}

/// Brute-force `I_1(pi)` on two states: minimum over `zeta` on a log grid
/// of `points` values per axis in `[1e-3, 10]`, plus `zeta_x = 0`.
pub fn contraction_grid_oracle(model: &Model, pi: &[f64], points: usize) -> f64 {
    assert_eq!(model.n(), 2);
    let zs: Vec<f64> = std::iter::once(0.0)
        .chain((0..points).map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / (points - 1) as f64)))
        .collect();
    let p = [[model.kernel.get(0, 0), model.kernel.get(0, 1)], [model.kernel.get(1, 0), model.kernel.get(1, 1)]];
    let term = |x: usize| -> Vec<f64> {
        zs.iter().map(|&z| crate::rate::perspective_term(&model.waits[x], pi[x], z)).collect()
    };
    let (ta, tb) = (term(0), term(1));
    let mut best = f64::INFINITY;
    for (i, &za) in zs.iter().enumerate() {
        if !ta[i].is_finite() {
            continue;
        }
        for (j, &zb) in zs.iter().enumerate() {
            let v = ta[i] + tb[j];
            if v < best {
                best = best.min(v + dv_two_state(p, za, zb));
            }
        }
    }
    best
}

/// `I_1` over a simplex grid, its zero set, and (on two states) the
/// nested-grid comparison.
pub fn run_contraction(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let kind = ExperimentKind::Contraction;
    let model = cfg.load_model()?;
    let c = &cfg.contraction;
    let pts = simplex_points(model.n(), c.resolution)?;
    let oracle = c.oracle && model.n() == 2;
    let opts = I1Options { restarts: c.restarts, seed: cfg.seeds[0], ..I1Options::default() };
    let vals: Vec<Result<(f64, Option<f64>)>> = pts
        .par_iter()
        .map(|pi| {
            let r = rate_I1_with(&model, pi, opts)?;
            let o = oracle.then(|| contraction_grid_oracle(&model, pi, c.oracle_points));
            Ok((r.value, o))
        })
        .collect();
    let mut rows = Vec::new();
    let mut zero_set = Vec::new();
    let mut max_gap: f64 = 0.0;
    for (pi, v) in pts.iter().zip(vals) {
        let (val, o) = v?;
        let label: Vec<String> = pi.iter().map(|p| format!("{p}")).collect();
        rows.push(ResultRow::new(kind, format!("metric=rate;pi={}", label.join(",")), val, o, None));
        if let Some(o) = o {
            if o.is_finite() || val.is_finite() {
                max_gap = max_gap.max((val - o).abs());
            }
        }
        if val < cfg.tolerances.zero {
            zero_set.push(pi.clone());
        }
    }
    let lln_marginal = CandidatePair::lln(&model, &QuadGrid::for_model(&model)).ok().map(|p| p.state_marginal());
    let mut at_lln = Value::Null;
    let mut failures = Vec::new();
    if let Some(m) = &lln_marginal {
        let v = rate_I1_with(&model, m, opts)?.value;
        rows.push(ResultRow::new(kind, "metric=rate_at_lln_marginal".into(), v, Some(0.0), None));
        if v > cfg.tolerances.zero {
            failures.push(Failure::new("rate", "I1 vanishes at the LLN marginal", None, format!("I1 = {v}")));
        }
        at_lln = json!({ "pi": m, "value": v });
    }
    let summary = json!({
        "points": pts.len(),
        "zero_set": zero_set,
        "lln_marginal": at_lln,
        "max_oracle_gap": if oracle { json!(max_gap) } else { Value::Null },
    });
    Ok(ExperimentOutput { kind, rows, summary, failures })
}

/// `Lambda_x`, `xi_x` and `Lambda*_x` over grids, with the flat region
/// `{m : Lambda*_x(m) = 0}` of each state.
pub fn run_legendre(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let kind = ExperimentKind::Legendre;
    let model = cfg.load_model()?;
    let l = &cfg.legendre;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut states = serde_json::Map::new();
    for (x, law) in model.waits.iter().enumerate() {
        let label = model.states.label(x);
        let xi = law.abscissa();
        rows.push(ResultRow::new(kind, format!("metric=xi;state={label}"), xi, None, None));
        for i in 0..l.theta_points {
            let th = l.theta_min + (l.theta_max - l.theta_min) * i as f64 / (l.theta_points - 1) as f64;
            rows.push(ResultRow::new(kind, format!("metric=log_mgf;state={label};theta={th}"), law.log_mgf(th), None, None));
        }
        let mean = law.mean();
        let mut ms: Vec<f64> =
            (0..l.m_points).map(|i| l.m_min + (l.m_max - l.m_min) * i as f64 / (l.m_points - 1) as f64).collect();
        if mean.is_finite() && mean > l.m_min && mean < l.m_max && !ms.contains(&mean) {
            ms.push(mean);
            ms.sort_by(f64::total_cmp);
        }
        let vals: Vec<f64> = ms.par_iter().map(|&m| law.legendre(m)).collect();
        let mut flat = Vec::new();
        for (&m, &v) in ms.iter().zip(&vals) {
            rows.push(ResultRow::new(kind, format!("metric=legendre;state={label};m={m}"), v, None, None));
            if v <= 1e-12 {
                flat.push(m);
            }
        }
        for i in 1..ms.len().saturating_sub(1) {
            let (a, b, c) = (vals[i - 1], vals[i], vals[i + 1]);
            if !(a.is_finite() && b.is_finite() && c.is_finite()) {
                continue;
            }
            let (h0, h1) = (ms[i] - ms[i - 1], ms[i + 1] - ms[i]);
            // Height of the chord above the middle value.
            let second = (h1 * a + h0 * c) / (h0 + h1) - b;
            if second < -1e-10 * (1.0 + b.abs()) {
                failures.push(Failure::new(
                    "waits",
                    "Legendre transform is convex",
                    None,
                    format!("state {label}: chord gap {second:e} at m = {}", ms[i]),
                ));
            }
        }
        let flat_hi = match flat.last() {
            Some(&m) if m == *ms.last().unwrap() => f64::INFINITY,
            Some(&m) => m,
            None => f64::NAN,
        };
        if let (Some(&lo), true) = (flat.first(), !flat.is_empty()) {
            rows.push(ResultRow::new(kind, format!("metric=flat_lo;state={label}"), lo, None, None));
            rows.push(ResultRow::new(kind, format!("metric=flat_hi;state={label}"), flat_hi, None, None));
        }
        states.insert(
            label.to_string(),
            json!({
                "family": law.family(),
                "xi": if xi.is_finite() { json!(xi) } else { json!("inf") },
                "mean": if mean.is_finite() { json!(mean) } else { json!("inf") },
                "flat_region": [flat.first(), if flat_hi.is_infinite() { json!("inf") } else { json!(flat.last()) }],
            }),
        );
    }
    Ok(ExperimentOutput { kind, rows, summary: Value::Object(states), failures })
}

/// A random pair in `U00` on `grid`: a random kernel on the support of
/// `model.kernel` and bounded random wait tilts `exp(a s + b s^2)` with
/// `s = tau / (1 + tau)`.
pub fn random_u00_pair(model: &Model, grid: &QuadGrid, rng: &mut SimRng) -> Result<CandidatePair> {
    let n = model.n();
    let mut k = vec![vec![0.0; n]; n];
    for (x, row) in k.iter_mut().enumerate() {
        for (y, v) in row.iter_mut().enumerate() {
            if model.kernel.get(x, y) > 0.0 {
                *v = rng.random_range(0.05..1.0);
            }
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let g: Vec<Vec<f64>> = grid
        .states
        .iter()
        .map(|st| {
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            st.nodes.iter().map(|t| {
                let s = t / (1.0 + t);
                (a * s + b * s * s).exp()
            }).collect()
        })
        .collect();
    CandidatePair::from_kernel_and_tilts(grid, &k, &g)
}

fn load_unchecked(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: ModelConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Model::from_config_unchecked(cfg).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// The property suite: model validity, exact trajectory residuals, entropy
/// properties, variational domination and likelihood-ratio consistency.
pub fn run_invariants(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let kind = ExperimentKind::Invariants;
    let iv = &cfg.invariants;
    let seed = cfg.seeds[0];
    let tol = &cfg.tolerances;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut paths = vec![cfg.model.clone()];
    paths.extend(iv.models.iter().cloned());

    let mut models = Vec::new();
    for p in &paths {
        let m = load_unchecked(p)?;
        let rep = validate_model(&m);
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(ResultRow::new(kind, format!("property=model_valid;model={name}"), rep.violations.len() as f64, Some(0.0), None));
        if rep.ok {
            models.push((name, m));
        } else {
            failures.push(Failure::new("model", "validate_model", None, format!("{name}: {}", rep.violations.join("; "))));
        }
    }
    if models.is_empty() {
        return Ok(ExperimentOutput { kind, rows, summary: json!({ "passed": false }), failures });
    }

    // Exact residual bounds on simulated trajectories.
    let t = iv.horizon;
    let traj_fail: Vec<Option<Failure>> = (0..iv.trajectories)
        .into_par_iter()
        .map(|i| {
            let (name, m) = &models[i % models.len()];
            let tr = match simulate_with(m, t, &mut rng_for(seed, i as u64)) {
                Ok(tr) => tr,
                Err(e) => return Some(Failure::new("simulate", "trajectory", Some(seed), e.to_string())),
            };
            let e = empirical_pair(&tr, m.n());
            let inv_t = 1.0 / t;
            for x in 0..m.n() {
                let g = e.kernel_gap(x);
                let d = e.divergence(x);
                if !(g >= 0.0 && g <= inv_t && d.abs() <= inv_t) {
                    return Some(Failure::new(
                        "simulate",
                        "residual bounds",
                        Some(seed),
                        format!("{name}, trajectory {i}, state {x}: gap {g:e}, divergence {d:e}"),
                    ));
                }
            }
            if e.total_inv_tau() > (tr.n_jumps as f64 + 1.0) / t {
                return Some(Failure::new("simulate", "jump-count bound", Some(seed), format!("{name}, trajectory {i}")));
            }
            None
        })
        .collect();
    let n_traj_fail = traj_fail.iter().flatten().count();
    rows.push(ResultRow::new(kind, "property=trajectory_residuals".into(), n_traj_fail as f64, Some(0.0), None));
    failures.extend(traj_fail.into_iter().flatten());

    // Entropy properties on random discrete laws.
    let mut rng = rng_for(seed, 1 << 32);
    let mut ent_fail = 0usize;
    for i in 0..iv.entropy_instances {
        let k = rng.random_range(2..=6);
        let mut draw = |zeros: bool| -> Vec<f64> {
            let mut v: Vec<f64> =
                (0..k).map(|_| if zeros && rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
            if v.iter().all(|&a| a == 0.0) {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|a| *a /= s);
            v
        };
        let (n1, n2, m1, m2) = (draw(true), draw(true), draw(false), draw(false));
        let lam: f64 = rng.random();
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| lam * u + (1.0 - lam) * v).collect() };
        let h1 = rel_entropy_discrete(&n1, &m1);
        let h2 = rel_entropy_discrete(&n2, &m2);
        let hm = rel_entropy_discrete(&mix(&n1, &n2), &mix(&m1, &m2));
        let ok = h1 >= -1e-10 && rel_entropy_discrete(&m1, &m1).abs() <= 1e-10 && hm <= lam * h1 + (1.0 - lam) * h2 + 1e-10;
        if !ok {
            ent_fail += 1;
            failures.push(Failure::new("measures", "entropy properties", Some(seed), format!("instance {i}")));
        }
    }
    rows.push(ResultRow::new(kind, "property=entropy".into(), ent_fail as f64, Some(0.0), None));

    // Variational domination and LR consistency on random U00 pairs.
    let mut max_excess = f64::NEG_INFINITY;
    let mut max_lr_gap: f64 = 0.0;
    for (mi, (name, m)) in models.iter().enumerate() {
        let grid = QuadGrid::for_model(m);
        for j in 0..iv.pairs {
            let stream = ((mi as u64) << 40) | ((j as u64) << 20);
            let pair = random_u00_pair(m, &grid, &mut rng_for(seed, stream))?;
            let i_val = rate_I_with_tol(m, &pair, tol.membership)?.value;
            let mut mrng = rng_for(seed, stream | 1);
            for k in 0..iv.members {
                let test = TestPair::random(m, &mut mrng)?;
                let v = rate_Ihh(m, &pair, &test)?;
                max_excess = max_excess.max(v - i_val);
                if v > i_val + tol.domination {
                    failures.push(Failure::new(
                        "rate",
                        "I_hH <= I",
                        Some(seed),
                        format!("{name}, pair {j}, member {k}: {v} > {i_val}"),
                    ));
                }
            }
            if j == 0 {
                let tilted = match tilt_from_pair(m, &pair) {
                    Ok(t) => t,
                    Err(e) => {
                        failures.push(Failure::new("tilt", "tilt_from_pair", Some(seed), format!("{name}: {e}")));
                        continue;
                    }
                };
                let gaps: Vec<Result<f64>> = (0..iv.lr_trajectories)
                    .into_par_iter()
                    .map(|r| {
                        let tr = simulate_with(&tilted, t, &mut rng_for(seed, stream | 2 | ((r as u64) << 2)))?;
                        let lr = log_likelihood_ratio(&tr, m, &tilted)?;
                        Ok((lr.direct - lr.functional).abs() / lr.direct.abs().max(1.0))
                    })
                    .collect();
                for g in gaps {
                    let g = g?;
                    max_lr_gap = max_lr_gap.max(g);
                    if g > tol.lr_relative {
                        failures.push(Failure::new("tilt", "likelihood-ratio routes agree", Some(seed), format!("{name}: {g:e}")));
                    }
                }
            }
        }
    }
    rows.push(ResultRow::new(kind, "property=domination_excess".into(), max_excess, Some(0.0), None));
    rows.push(ResultRow::new(kind, "property=lr_route_gap".into(), max_lr_gap, Some(0.0), None));

    // Optional candidate file: outside Lambda_0 the rate must be +inf.
    let mut candidate = Value::Null;
    if let Some(path) = &iv.candidate {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let pair = CandidatePair::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let m = &models[0].1;
        let class = check_membership(&pair, tol.membership).class;
        let v = rate_I_with_tol(m, &pair, tol.membership)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .value;
        let ok = if class < Membership::Lambda0 { v == f64::INFINITY } else { v.is_finite() && v >= 0.0 };
        rows.push(ResultRow::new(kind, "property=candidate_rate".into(), v, None, None));
        if !ok {
            failures.push(Failure::new("rate", "membership gate", None, format!("class {class:?}, value {v}")));
        }
        candidate = json!({ "class": class, "rate": if v.is_finite() { json!(v) } else { json!("inf") } });
    }
    let summary = json!({
        "passed": failures.is_empty(),
        "models": models.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        "max_domination_excess": max_excess,
        "max_lr_route_gap": max_lr_gap,
        "candidate": candidate,
    });
    Ok(ExperimentOutput { kind, rows, summary, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("models")
    }

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(text, &models_dir()).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = cfg("model = \"two_state_exp.toml\"");
        assert_eq!(c.schedule_for(ExperimentKind::Decay), vec![50.0, 100.0, 200.0]);
        assert_eq!(c.schedule_for(ExperimentKind::Lln), vec![1e2, 1e3, 1e4]);
        assert!(c.validate(ExperimentKind::Lln).is_ok());
        let c = cfg("model = \"two_state_exp.toml\"\nseeds = [1, 1]");
        assert!(c.validate(ExperimentKind::Lln).unwrap_err().to_string().contains("seeds"));
        let c = cfg("model = \"two_state_exp.toml\"\nschedule = [10.0, 5.0]");
        assert!(c.validate(ExperimentKind::Lln).unwrap_err().to_string().contains("schedule"));
        let e = ExperimentConfig::from_toml_str("model = \"m.toml\"\nbogus = 1", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let c = cfg("kind = \"decay\"\nmodel = \"two_state_exp.toml\"");
        assert!(c.validate(ExperimentKind::Lln).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ResultRow::new(ExperimentKind::Lln, "metric=distance;t=100;seed=1".into(), 0.1 + 0.2, Some(0.0), None),
            ResultRow::new(ExperimentKind::Decay, "radius=0.1".into(), f64::INFINITY, Some(1.0 / 3.0), Some(2e-300)),
            ResultRow::new(ExperimentKind::Legendre, "x=\"quoted, comma\"".into(), -1.2345678901234567e-17, None, None),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
        assert_eq!(rows[0].param("t"), Some("100"));
    }

    #[test]
    fn two_state_dv_closed_form() {
        let k = crate::model::Kernel::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let p = [[0.2, 0.8], [0.6, 0.4]];
        for z in [[0.5, 0.5], [0.1, 0.9], [2.0, 0.3]] {
            let a = dv_two_state(p, z[0], z[1]);
            let b = crate::rate::donsker_varadhan(&k, &z).unwrap().value;
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((dv_two_state(p, 0.0, 1.0) + 0.4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn simplex_grid() {
        assert_eq!(simplex_points(2, 0.25).unwrap().len(), 5);
        let p = simplex_points(3, 0.1).unwrap();
        assert_eq!(p.len(), 66);
        assert!(p.iter().all(|v| (v.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn legendre_run_flat_regions() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.toml");
        fs::write(
            &m,
            "states = [\"a\", \"b\"]\nkernel = [[0.5, 0.5], [0.5, 0.5]]\n[waits.a]\nfamily = \"exponential\"\nrate = 1.0\n\
             [waits.b]\nfamily = \"pareto\"\nindex = 3.0\nscale = 1.0\n",
        )
        .unwrap();
        let c = ExperimentConfig::from_toml_str(&format!("model = {:?}", m.display().to_string()), dir.path()).unwrap();
        let out = run(ExperimentKind::Legendre, &c).unwrap();
        assert!(out.passed(), "{:?}", out.failures);
        let get = |metric: &str, state: &str| {
            out.rows
                .iter()
                .find(|r| r.param("metric") == Some(metric) && r.param("state") == Some(state))
                .map(|r| r.measured)
        };
        assert_eq!(get("flat_lo", "a"), Some(1.0));
        assert_eq!(get("flat_hi", "a"), Some(1.0));
        assert_eq!(get("xi", "b"), Some(0.0));
        let lo = get("flat_lo", "b").unwrap();
        assert!((lo - 1.5).abs() < 1e-12, "{lo}");
        assert_eq!(get("flat_hi", "b"), Some(f64::INFINITY));
    }

    #[test]
    fn invariants_flag_broken_kernel() {
        let c = cfg("model = \"broken_kernel.toml\"\n[invariants]\ntrajectories = 10\npairs = 1\nmembers = 2\nlr_trajectories = 2\nentropy_instances = 10");
        let out = run(ExperimentKind::Invariants, &c).unwrap();
        assert!(!out.passed());
        assert!(out.failures[0].detail.contains("row 0 sums to 0.9"), "{:?}", out.failures);
    }

    #[test]
    fn execute_writes_reproducible_files() {
        let dir = tempfile::tempdir().unwrap();
        let text = "model = \"two_state_exp.toml\"\nschedule = [20.0, 40.0]\nseeds = [1, 2]\n";
        let c = cfg(text);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let out = execute(ExperimentKind::Lln, &c, text, &a).unwrap();
        execute(ExperimentKind::Lln, &c, text, &b).unwrap();
        for f in ["results.csv", "report.json", "manifest.json"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        assert_eq!(read_csv(&a.join("results.csv")).unwrap(), out.rows);
        let man: Manifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(man.config_sha256, sha256_hex(text.as_bytes()));
        assert_eq!(man.seeds, vec![1, 2]);
    }
}
