//! Exponential tilts `(q^H, psi^h)` of a model, trajectory likelihood
//! ratios and importance-sampling estimates of rare events.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::QuadGrid;
use crate::measures::{check_membership, measure_gap, CandidatePair, Membership, PairView, DEFAULT_TOL};
use crate::model::{stationary_of, Kernel, Model};
use crate::rate::{ihh_value, Phi, TestPair};
use crate::simulate::{empirical_pair, rng_for, sample_categorical, simulate_with, EmpiricalPair, RenewalSampler, SimRng, Trajectory};
use crate::waits::WaitLaw;
use crate::{Error, Result};

/// Acceptance below this aborts construction of a rejection sampler.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

/// How a tilted waiting law is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TiltedWait {
    /// The tilt stays in the family.
    Closed(WaitLaw),
    /// Rejection from `psi_x` on `tau <= M` with envelope `e^{sup phi}`;
    /// on `tau > M` (when `c > 0`) rejection from `psi_x` tilted by `e^{c tau}`.
    Rejection {
        sup_phi: f64,
        /// Probability of the `tau <= M` part (1 when `c = 0`).
        body_prob: f64,
        tail: Option<WaitLaw>,
        threshold: f64,
        /// Smallest per-part acceptance rate.
        acceptance: f64,
    },
}

/// The law `P^{(h,H)}`: kernel `q^H` and waits `psi^h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedModel {
    pub base: Model,
    pub kernel: Kernel,
    pub waits: Vec<TiltedWait>,
    pub test: TestPair,
    /// Initial law; defaults to the base model's.
    pub initial: Vec<f64>,
    /// The pair the tilt was built from, if any.
    pub source: Option<CandidatePair>,
}

/// Tilted model for an arbitrary `(h, H)` with finite normalizers.
pub fn tilt_from_hh(model: &Model, test: &TestPair) -> Result<TiltedModel> {
    let n = model.n();
    if test.n_states() != n {
        return Err(Error::InvalidArgument("test pair has the wrong number of states".into()));
    }
    let mut rows = vec![vec![0.0; n]; n];
    for x in 0..n {
        let lz = test.log_kernel_normalizer(x);
        if !lz.is_finite() {
            return Err(Error::InfiniteNormalizer(format!("state {}: kernel normalizer", model.states.label(x))));
        }
        for y in 0..n {
            let p = model.kernel.get(x, y);
            if p > 0.0 {
                rows[x][y] = p * (test.h_matrix()[x][y] - lz).exp();
            }
        }
        let s: f64 = rows[x].iter().sum();
        rows[x].iter_mut().for_each(|v| *v /= s);
    }
    let kernel = Kernel::from_rows(rows)?;
    let mut waits = Vec::with_capacity(n);
    for x in 0..n {
        let lz = test.log_wait_normalizer(x);
        if !lz.is_finite() {
            return Err(Error::InfiniteNormalizer(format!(
                "state {}: psi(e^(tau h)) = {}",
                model.states.label(x),
                lz.exp()
            )));
        }
        waits.push(tilted_wait(model, test, x)?);
    }
    Ok(TiltedModel { base: model.clone(), kernel, waits, test: test.clone(), initial: model.initial.clone(), source: None })
}

fn tilted_wait(model: &Model, test: &TestPair, x: usize) -> Result<TiltedWait> {
    let law = &model.waits[x];
    let phi = &test.phi()[x];
    let c = test.c()[x];
    let label = model.states.label(x);
    if c == 0.0 {
        if let Phi::Affine { slope, .. } = *phi {
            if let Some(l) = law.exponential_tilt(slope) {
                return Ok(TiltedWait::Closed(l));
            }
        }
    }
    let sup_phi = phi.sup();
    if !sup_phi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "state {label}: no sampler for an unbounded tilt of a {} law",
            law.family()
        )));
    }
    let lz = test.log_wait_normalizer(x);
    if c == 0.0 {
        let acceptance = (lz - sup_phi).exp();
        check_acceptance(label, acceptance)?;
        return Ok(TiltedWait::Rejection { sup_phi, body_prob: 1.0, tail: None, threshold: f64::INFINITY, acceptance });
    }
    let m = test.thresholds()[x];
    let Some(tail) = law.exponential_tilt(c) else {
        return Err(Error::InvalidArgument(format!(
            "state {label}: no sampler for a tail tilt of a {} law",
            law.family()
        )));
    };
    let mut breaks = phi_breaks(phi);
    breaks.push(m);
    let body = law.log_expect(&|t| if t <= m { phi.eval(t) } else { f64::NEG_INFINITY }, &breaks);
    let tail_part = tail.log_expect(&|t| if t > m { phi.eval(t) } else { f64::NEG_INFINITY }, &breaks);
    let body_prob = (body - lz).exp().clamp(0.0, 1.0);
    let mut acceptance = f64::INFINITY;
    if body_prob > 0.0 {
        acceptance = acceptance.min((body - sup_phi).exp());
    }
    if body_prob < 1.0 {
        acceptance = acceptance.min((tail_part - sup_phi).exp());
    }
    check_acceptance(label, acceptance)?;
    Ok(TiltedWait::Rejection { sup_phi, body_prob, tail: Some(tail), threshold: m, acceptance })
}

fn phi_breaks(phi: &Phi) -> Vec<f64> {
    match phi {
        Phi::Affine { .. } => Vec::new(),
        Phi::PiecewiseLinear { knots, .. } => knots.clone(),
        Phi::Tabulated { nodes, .. } => nodes.clone(),
    }
}

fn check_acceptance(label: &str, rate: f64) -> Result<()> {
    if rate < MIN_ACCEPTANCE {
        return Err(Error::LowAcceptance { state: label.to_string(), rate });
    }
    Ok(())
}

/// The tilt that makes `pair` the law of large numbers:
/// `H = log(Q / (Z_x p))`, `phi_x = log(rho_x / (Z_x tau))` with
/// `Z_x = sum_y Q(x, y)`.
pub fn tilt_from_pair(model: &Model, pair: &CandidatePair) -> Result<TiltedModel> {
    if !pair.grid.matches(&model.waits) {
        return Err(Error::InvalidArgument("pair grid was built for different wait laws".into()));
    }
    let report = check_membership(pair, DEFAULT_TOL);
    if report.class != Membership::U00 {
        return Err(Error::Membership(format!("tilting needs a U00 pair, got {}", report.summary())));
    }
    let n = model.n();
    let mut h = vec![vec![0.0; n]; n];
    let mut phi = Vec::with_capacity(n);
    for x in 0..n {
        let z = pair.out_flow(x);
        for y in 0..n {
            let p = model.kernel.get(x, y);
            if p > 0.0 {
                let q = pair.flow[x][y];
                h[x][y] = if q > 0.0 { (q / (z * p)).ln() } else { f64::NEG_INFINITY };
            } else if pair.flow[x][y] > 0.0 {
                return Err(Error::Membership(format!("flow on edge ({x}, {y}) outside the kernel support")));
            }
        }
        let g = pair.grid.state(x);
        let values = g
            .nodes
            .iter()
            .zip(&pair.density[x])
            .map(|(t, r)| if *r > 0.0 { (r / (z * t)).ln().max(-700.0) } else { -700.0 })
            .collect();
        phi.push(Phi::Tabulated { nodes: g.nodes.clone(), values });
    }
    let test = TestPair::tilt(model, phi, vec![0.0; n], vec![0.0; n], h)?;
    let mut t = tilt_from_hh(model, &test)?;
    t.source = Some(pair.clone());
    Ok(t)
}

impl TiltedModel {
    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// Starts every trajectory at `x`.
    pub fn with_initial_state(mut self, x: usize) -> Result<Self> {
        if x >= self.n() {
            return Err(Error::InvalidArgument(format!("initial state {x} out of range")));
        }
        self.initial = (0..self.n()).map(|y| if y == x { 1.0 } else { 0.0 }).collect();
        Ok(self)
    }

    /// Row sums of `q^H` within `1e-12`, `q^H` irreducible, finite normalizers.
    pub fn is_valid(&self) -> bool {
        let n = self.n();
        (0..n).all(|x| (self.kernel.row(x).iter().sum::<f64>() - 1.0).abs() <= 1e-12)
            && self.kernel.is_irreducible()
            && (0..n).all(|x| self.test.log_wait_normalizer(x).is_finite())
    }

    /// Stationary law `nu^H` of `q^H`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        stationary_of(self.n(), |x, y| self.kernel.get(x, y))
    }

    /// `log(d psi^h_x / d psi_x)(tau)`.
    pub fn log_wait_density(&self, x: usize, tau: f64) -> f64 {
        self.test.tau_h(x, tau) - self.test.log_wait_normalizer(x)
    }

    /// Mean of `psi^h_x`.
    pub fn mean_wait(&self, x: usize) -> f64 {
        if let TiltedWait::Closed(l) = &self.waits[x] {
            return l.mean();
        }
        let mut breaks = phi_breaks(&self.test.phi()[x]);
        breaks.push(self.test.thresholds()[x]);
        let v = self.base.waits[x].log_expect(&|t| t.ln() + self.test.tau_h(x, t), &breaks);
        (v - self.test.log_wait_normalizer(x)).exp()
    }

    /// Mean of `psi^h_x` with `psi_x` replaced by its grid rule.
    pub fn grid_mean_wait(&self, grid: &QuadGrid, x: usize) -> f64 {
        let g = grid.state(x);
        let w: Vec<f64> = g.nodes.iter().zip(&g.weights).map(|(&t, w)| w * self.test.tau_h(x, t).exp()).collect();
        let num: f64 = w.iter().zip(&g.nodes).map(|(w, t)| w * t).sum();
        num / w.iter().sum::<f64>()
    }

    /// `E_{nu^H}(tau_1)` under the tilted law.
    pub fn mean_cycle(&self) -> Result<f64> {
        let nu = self.stationary()?;
        Ok((0..self.n()).map(|x| nu[x] * self.mean_wait(x)).sum())
    }

    /// LLN limit of the tilted law, on `grid`.
    pub fn lln_limit(&self, grid: &QuadGrid) -> Result<CandidatePair> {
        let g: Vec<Vec<f64>> = (0..self.n())
            .map(|x| grid.state(x).nodes.iter().map(|&t| self.test.tau_h(x, t).exp()).collect())
            .collect();
        CandidatePair::from_kernel_and_tilts(grid, &self.kernel.rows(), &g)
    }

    fn log_step_ratio(&self, x: usize, tau: f64, y: usize) -> f64 {
        let wait = match &self.waits[x] {
            TiltedWait::Closed(l) => {
                let (a, b) = (l.ln_pdf(tau), self.base.waits[x].ln_pdf(tau));
                if a.is_finite() && b.is_finite() {
                    a - b
                } else {
                    self.log_wait_density(x, tau)
                }
            }
            TiltedWait::Rejection { .. } => self.log_wait_density(x, tau),
        };
        let q = self.kernel.get(x, y);
        let jump = if q > 0.0 { (q / self.base.kernel.get(x, y)).ln() } else { f64::NEG_INFINITY };
        wait + jump
    }

    fn log_initial_ratio(&self, x: usize) -> f64 {
        let a = self.initial[x];
        if a == 0.0 {
            f64::NEG_INFINITY
        } else {
            (a / self.base.initial[x]).ln()
        }
    }

    fn sample_tilted_wait(&self, x: usize, rng: &mut SimRng) -> f64 {
        match &self.waits[x] {
            TiltedWait::Closed(l) => l.sample(rng),
            TiltedWait::Rejection { sup_phi, body_prob, tail, threshold, .. } => {
                let phi = &self.test.phi()[x];
                let use_tail = tail.is_some() && rng.random::<f64>() >= *body_prob;
                let law = if use_tail { tail.as_ref().unwrap() } else { &self.base.waits[x] };
                loop {
                    let t = law.sample(rng);
                    if (t > *threshold) != use_tail {
                        continue;
                    }
                    if rng.random::<f64>() < (phi.eval(t) - sup_phi).exp() {
                        return t;
                    }
                }
            }
        }
    }
}

impl RenewalSampler for TiltedModel {
    fn n_states(&self) -> usize {
        self.n()
    }
    fn sample_initial(&self, rng: &mut SimRng) -> usize {
        sample_categorical(&self.initial, rng)
    }
    fn sample_wait(&self, x: usize, rng: &mut SimRng) -> f64 {
        self.sample_tilted_wait(x, rng)
    }
    fn sample_jump(&self, x: usize, rng: &mut SimRng) -> usize {
        sample_categorical(self.kernel.row(x), rng)
    }
}

/// `log dP^{(h,H)} / dP` on the observed path, computed two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    /// Sum of per-step log density ratios plus the initial term.
    pub direct: f64,
    /// `t I_{h,H}(mu_t, Q_t) + boundary + initial`.
    pub functional: f64,
    /// `(tau_{N+1} - t + S_N) h(tau_{N+1})`.
    pub boundary: f64,
    /// `log(gamma^H(X_0) / gamma(X_0))`.
    pub initial: f64,
}

/// Log-likelihood ratio of the tilted law against `base` on a trajectory.
pub fn log_likelihood_ratio(traj: &Trajectory, base: &Model, tilted: &TiltedModel) -> Result<LrResult> {
    if base != &tilted.base {
        return Err(Error::InvalidArgument("tilted model was built from a different base".into()));
    }
    let n = traj.n_jumps;
    let initial = tilted.log_initial_ratio(traj.states[0]);
    let mut direct = initial;
    for k in 0..=n {
        direct += tilted.log_step_ratio(traj.states[k], traj.waits[k], traj.states[k + 1]);
    }
    let emp = empirical_pair(traj, base.n());
    let last = traj.states[n];
    let tau = traj.waits[n];
    let overshoot = traj.s(n + 1) - traj.horizon;
    let boundary = if overshoot > 0.0 { overshoot * tilted.test.tau_h(last, tau) / tau } else { 0.0 };
    let functional = traj.horizon * ihh_value(base, &emp, &tilted.test) + boundary + initial;
    Ok(LrResult { direct, functional, boundary, initial })
}

/// Log-likelihood ratio of the hybrid law that follows the tilt for the
/// first `steps` holding times and jumps, and `base` afterwards.
pub fn log_likelihood_ratio_hybrid(traj: &Trajectory, tilted: &TiltedModel, steps: usize) -> f64 {
    let mut v = tilted.log_initial_ratio(traj.states[0]);
    for k in 0..=traj.n_jumps.min(steps.saturating_sub(1)) {
        if k >= steps {
            break;
        }
        v += tilted.log_step_ratio(traj.states[k], traj.waits[k], traj.states[k + 1]);
    }
    v
}

/// Simulates the hybrid law of [`log_likelihood_ratio_hybrid`].
pub fn simulate_hybrid(tilted: &TiltedModel, steps: usize, t: f64, rng: &mut SimRng) -> Result<Trajectory> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive and finite, got {t}")));
    }
    let mut x = tilted.sample_initial(rng);
    let mut states = vec![x];
    let mut waits = Vec::new();
    let mut times = Vec::new();
    let mut s = 0.0;
    let mut k = 0;
    loop {
        let (tau, y) = if k < steps {
            (tilted.sample_wait(x, rng), tilted.sample_jump(x, rng))
        } else {
            (tilted.base.sample_wait(x, rng), tilted.base.sample_jump(x, rng))
        };
        k += 1;
        s += tau;
        x = y;
        waits.push(tau);
        times.push(s);
        states.push(x);
        if s > t {
            break;
        }
    }
    let n_jumps = waits.len() - 1;
    Ok(Trajectory { horizon: t, states, waits, times, n_jumps })
}

/// The ball `{pair : distance(pair, center) < radius}`.
#[derive(Debug, Clone)]
pub struct BallEvent {
    radius: f64,
    points: Vec<Vec<(f64, f64)>>,
    marginals: Vec<f64>,
    flow: Vec<Vec<f64>>,
}

impl BallEvent {
    pub fn new<P: PairView + ?Sized>(center: &P, radius: f64) -> Self {
        let n = center.n_states();
        BallEvent {
            radius,
            points: (0..n).map(|x| center.points(x)).collect(),
            marginals: (0..n).map(|x| center.marginal(x)).collect(),
            flow: (0..n).map(|x| (0..n).map(|y| center.flow(x, y)).collect()).collect(),
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn distance_to(&self, emp: &EmpiricalPair) -> f64 {
        let n = self.flow.len();
        let mut d = 0.0;
        for x in 0..n {
            d += measure_gap(&emp.points(x), emp.marginal(x), &self.points[x], self.marginals[x]);
        }
        let mut q: f64 = 0.0;
        for x in 0..n {
            for y in 0..n {
                q = q.max((emp.flow[x][y] - self.flow[x][y]).abs());
            }
        }
        d + q
    }

    pub fn contains(&self, emp: &EmpiricalPair) -> bool {
        self.distance_to(emp) < self.radius
    }
}

/// An importance-sampling estimate with a 95% normal interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    pub t: f64,
    pub n: usize,
    pub estimate: f64,
    /// Half-width `1.96 sd / sqrt(n)`.
    pub ci: f64,
    /// `ci / estimate`.
    pub rel_ci: f64,
    /// `-log(estimate) / t`.
    pub rate_estimate: f64,
    /// Trajectories that hit the event.
    pub hits: usize,
}

/// `(1/n) sum 1_event e^{-log LR}` over trajectories drawn from `tilted`.
pub fn estimate_probability(
    base: &Model,
    tilted: &TiltedModel,
    event: &(dyn Fn(&EmpiricalPair) -> bool + Sync),
    t: f64,
    n: usize,
    seed: u64,
) -> Result<IsEstimate> {
    estimate_probability_with(base, tilted, event, t, n, seed, None)
}

/// As [`estimate_probability`]; with `hybrid = Some(delta)` only the first
/// `floor((1 + delta) t / E_{nu^H}(tau_1))` steps are tilted.
pub fn estimate_probability_with(
    base: &Model,
    tilted: &TiltedModel,
    event: &(dyn Fn(&EmpiricalPair) -> bool + Sync),
    t: f64,
    n: usize,
    seed: u64,
    hybrid: Option<f64>,
) -> Result<IsEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two trajectories".into()));
    }
    if base != &tilted.base {
        return Err(Error::InvalidArgument("tilted model was built from a different base".into()));
    }
    let steps = match hybrid {
        Some(d) if d >= 0.0 => {
            let z = 1.0 / tilted.mean_cycle()?;
            Some(((1.0 + d) * z * t).floor() as usize)
        }
        Some(d) => return Err(Error::InvalidArgument(format!("hybrid delta must be >= 0, got {d}"))),
        None => None,
    };
    let samples: Vec<Result<(bool, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let (traj, lr) = match steps {
                Some(k) => {
                    let tr = simulate_hybrid(tilted, k, t, &mut rng)?;
                    let lr = log_likelihood_ratio_hybrid(&tr, tilted, k);
                    (tr, lr)
                }
                None => {
                    let tr = simulate_with(tilted, t, &mut rng)?;
                    let lr = log_likelihood_ratio(&tr, base, tilted)?.direct;
                    (tr, lr)
                }
            };
            let hit = event(&empirical_pair(&traj, base.n()));
            Ok((hit, if hit { (-lr).exp() } else { 0.0 }))
        })
        .collect();
    let mut weights = Vec::with_capacity(n);
    let mut hits = 0;
    for s in samples {
        let (h, w) = s?;
        hits += h as usize;
        weights.push(w);
    }
    let mean = weights.iter().sum::<f64>() / n as f64;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1) as f64;
    let ci = 1.96 * (var / n as f64).sqrt();
    Ok(IsEstimate {
        t,
        n,
        estimate: mean,
        ci,
        rel_ci: if mean > 0.0 { ci / mean } else { f64::INFINITY },
        rate_estimate: -mean.ln() / t,
        hits,
    })
}

/// Plain Monte Carlo estimate of `P(event)` under `model`.
pub fn crude_probability(
    model: &Model,
    event: &(dyn Fn(&EmpiricalPair) -> bool + Sync),
    t: f64,
    n: usize,
    seed: u64,
) -> Result<IsEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two trajectories".into()));
    }
    let hits: Vec<Result<bool>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let tr = simulate_with(model, t, &mut rng_for(seed, i as u64))?;
            Ok(event(&empirical_pair(&tr, model.n())))
        })
        .collect();
    let mut k = 0usize;
    for h in hits {
        k += h? as usize;
    }
    let p = k as f64 / n as f64;
    let var = p * (1.0 - p) * n as f64 / (n - 1) as f64;
    let ci = 1.96 * (var / n as f64).sqrt();
    Ok(IsEstimate {
        t,
        n,
        estimate: p,
        ci,
        rel_ci: if p > 0.0 { ci / p } else { f64::INFINITY },
        rate_estimate: -p.ln() / t,
        hits: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateSpace;
    use crate::rate::rate_I;
    use crate::simulate::simulate;

    fn exp2() -> Model {
        Model::new(
            StateSpace::new(["a", "b"]).unwrap(),
            Kernel::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap(),
            vec![WaitLaw::exponential(1.0), WaitLaw::exponential(2.0)],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn flat_pair(m: &Model) -> CandidatePair {
        let grid = QuadGrid::for_model(m);
        let ones: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![1.0; g.len()]).collect();
        CandidatePair::from_kernel_and_tilts(&grid, &[vec![0.5, 0.5], vec![0.5, 0.5]], &ones).unwrap()
    }

    fn consts(m: &Model, beta: f64, b2: f64) -> TestPair {
        TestPair::new(m, vec![Phi::constant(beta); 2], vec![0.0; 2], vec![0.0; 2], vec![vec![b2; 2]; 2]).unwrap()
    }

    #[test]
    fn constant_tilt_is_identity() {
        let m = exp2();
        let t = tilt_from_hh(&m, &consts(&m, -0.4, -0.7)).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert!((t.kernel.get(x, y) - m.kernel.get(x, y)).abs() < 1e-15);
            }
            assert_eq!(t.waits[x], TiltedWait::Closed(m.waits[x].clone()));
            assert!(t.log_wait_density(x, 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_tilt_arithmetic() {
        let m = exp2();
        let h = vec![vec![-3.0, -3.0 + 4f64.ln()], vec![-1.0, -1.0]];
        let test = TestPair::new(&m, vec![Phi::constant(-1.0); 2], vec![0.0; 2], vec![0.0; 2], h).unwrap();
        let t = tilt_from_hh(&m, &test).unwrap();
        assert!((t.kernel.get(0, 0) - 0.2 / 3.4).abs() < 1e-15);
        assert!((t.kernel.get(0, 1) - 3.2 / 3.4).abs() < 1e-15);
        assert!(t.is_valid());
    }

    #[test]
    fn exponential_conjugacy() {
        let m = Model::new(
            StateSpace::new(["a"]).unwrap(),
            Kernel::from_rows(vec![vec![1.0]]).unwrap(),
            vec![WaitLaw::exponential(1.0)],
            vec![1.0],
        )
        .unwrap();
        let test = TestPair::new(&m, vec![Phi::Affine { intercept: 0.0, slope: -0.5 }], vec![0.0], vec![0.0], vec![vec![-0.1]])
            .unwrap();
        let t = tilt_from_hh(&m, &test).unwrap();
        assert_eq!(t.waits[0], TiltedWait::Closed(WaitLaw::exponential(1.5)));
        assert!((t.log_wait_density(0, 2.0) - (1.5f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn self_tilt_reproduces_base() {
        let m = exp2();
        let grid = QuadGrid::for_model(&m);
        let p = CandidatePair::lln(&m, &grid).unwrap();
        let t = tilt_from_pair(&m, &p).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert!((t.kernel.get(x, y) - m.kernel.get(x, y)).abs() < 1e-10);
            }
            if let Phi::Tabulated { values, .. } = &t.test.phi()[x] {
                assert!(values.iter().all(|v| v.abs() < 1e-10));
            }
            assert!(t.log_wait_density(x, 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn pair_tilt_identities() {
        let m = exp2();
        let p = flat_pair(&m);
        let t = tilt_from_pair(&m, &p).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert!((t.kernel.get(x, y) - 0.5).abs() < 1e-14);
            }
        }
        let z: Vec<f64> = (0..2).map(|x| p.out_flow(x)).collect();
        let zs: f64 = z.iter().sum();
        let nu = t.stationary().unwrap();
        for x in 0..2 {
            assert!((nu[x] - z[x] / zs).abs() < 1e-10);
        }
        let mean: f64 = (0..2).map(|x| nu[x] * t.grid_mean_wait(&p.grid, x)).sum();
        assert!((mean - 1.0 / zs).abs() < 1e-10, "{mean} vs {}", 1.0 / zs);
        let back = t.lln_limit(&p.grid).unwrap();
        for x in 0..2 {
            for (a, b) in back.density[x].iter().zip(&p.density[x]) {
                assert!((a - b).abs() < 1e-10);
            }
            for y in 0..2 {
                assert!((back.flow[x][y] - p.flow[x][y]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_tilt_needs_u00() {
        let m = exp2();
        let mut p = flat_pair(&m);
        p.flow[0][1] += 0.1;
        assert!(matches!(tilt_from_pair(&m, &p), Err(Error::Membership(_))));
    }

    #[test]
    fn lr_identity_and_routes() {
        let m = exp2();
        let base = tilt_from_hh(&m, &consts(&m, -0.5, -0.5)).unwrap();
        let tr = simulate(&m, 30.0, 3).unwrap();
        let lr = log_likelihood_ratio(&tr, &m, &base).unwrap();
        assert!(lr.direct.abs() < 1e-12);

        let t = tilt_from_pair(&m, &flat_pair(&m)).unwrap();
        let sup = t.test.phi_sup_norm();
        for seed in 0..30 {
            let tr = simulate_with(&t, 50.0, &mut rng_for(seed, 0)).unwrap();
            let lr = log_likelihood_ratio(&tr, &m, &t).unwrap();
            assert!((lr.direct - lr.functional).abs() <= 1e-8 * lr.direct.abs().max(1.0));
            assert!(lr.boundary >= -sup);
        }
    }

    #[test]
    fn hand_trajectory() {
        let m = exp2();
        let h = vec![vec![-1.0, -0.5], vec![-0.3, -2.0]];
        let phi = vec![Phi::constant(-0.2), Phi::Affine { intercept: -0.1, slope: -1.0 }];
        let test = TestPair::new(&m, phi, vec![0.0; 2], vec![0.0; 2], h.clone()).unwrap();
        let t = tilt_from_hh(&m, &test).unwrap();
        // a --0.5--> b --1.0--> a --2.0--> b, horizon 2.
        let tr = Trajectory {
            horizon: 2.0,
            states: vec![0, 1, 0, 1],
            waits: vec![0.5, 1.0, 2.0],
            times: vec![0.5, 1.5, 3.5],
            n_jumps: 2,
        };
        let lk = |x: usize| {
            let r = m.kernel.row(x);
            (r[0] * h[x][0].exp() + r[1] * h[x][1].exp()).ln()
        };
        // Exp(1) with constant phi: normalizer e^{-0.2}; Exp(2) tilted by -1: 2/3 e^{-0.1}.
        let lw = [-0.2, -0.1 + (2.0f64 / 3.0).ln()];
        let th = |x: usize, tau: f64| if x == 0 { -0.2 } else { -0.1 - tau };
        let expect = (h[0][1] - lk(0)) + (th(0, 0.5) - lw[0])
            + (h[1][0] - lk(1)) + (th(1, 1.0) - lw[1])
            + (h[0][1] - lk(0)) + (th(0, 2.0) - lw[0]);
        let lr = log_likelihood_ratio(&tr, &m, &t).unwrap();
        assert!((lr.direct - expect).abs() < 1e-12, "{} vs {expect}", lr.direct);
        assert!((lr.functional - expect).abs() < 1e-12);
        assert!((lr.boundary + 0.15).abs() < 1e-12);
    }

    #[test]
    fn estimator_identity_cases() {
        let m = exp2();
        let base = tilt_from_hh(&m, &consts(&m, -0.5, -0.5)).unwrap();
        let all = |_: &EmpiricalPair| true;
        let e = estimate_probability(&m, &base, &all, 20.0, 200, 1).unwrap();
        assert!((e.estimate - 1.0).abs() < 1e-12 && e.ci < 1e-10);
        let t = tilt_from_pair(&m, &flat_pair(&m)).unwrap();
        let e = estimate_probability(&m, &t, &all, 20.0, 2000, 1).unwrap();
        assert!((e.estimate - 1.0).abs() <= 3.0 * e.ci, "{e:?}");
        let e2 = estimate_probability(&m, &t, &all, 20.0, 2000, 1).unwrap();
        assert_eq!(e, e2);
        let hy = estimate_probability_with(&m, &t, &all, 20.0, 2000, 2, Some(0.1)).unwrap();
        assert!((hy.estimate - 1.0).abs() <= 3.0 * hy.ci, "{hy:?}");
    }

    #[test]
    fn rejection_sampler_means() {
        let m = Model::new(
            StateSpace::new(["a", "b"]).unwrap(),
            Kernel::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
            vec![WaitLaw::pareto(2.5, 1.0), WaitLaw::Gamma { shape: 2.0, scale: 1.0 }],
            vec![0.5, 0.5],
        )
        .unwrap();
        let phi = vec![
            Phi::PiecewiseLinear { knots: vec![1.0, 3.0], values: vec![-1.0, -2.0] },
            Phi::PiecewiseLinear { knots: vec![0.5, 2.0], values: vec![-1.5, -1.0] },
        ];
        let test = TestPair::tilt(&m, phi, vec![0.0, 0.3], vec![0.0, 2.5], vec![vec![-1.0; 2]; 2]).unwrap();
        let t = tilt_from_hh(&m, &test).unwrap();
        let mut rng = rng_for(11, 0);
        for x in 0..2 {
            let n = 200_000;
            let s: f64 = (0..n).map(|_| t.sample_wait(x, &mut rng)).sum::<f64>() / n as f64;
            let mean = t.mean_wait(x);
            assert!((s / mean - 1.0).abs() < 0.02, "state {x}: {s} vs {mean}");
        }
    }

    #[test]
    fn relative_entropy_rate() {
        let m = exp2();
        let p = flat_pair(&m);
        let i = rate_I(&m, &p).unwrap().value;
        let t = tilt_from_pair(&m, &p).unwrap();
        let horizon = 200.0;
        let lrs: Vec<f64> = (0..50)
            .map(|s| {
                let tr = simulate_with(&t, horizon, &mut rng_for(5, s)).unwrap();
                log_likelihood_ratio(&tr, &m, &t).unwrap().direct / horizon
            })
            .collect();
        let mean = lrs.iter().sum::<f64>() / lrs.len() as f64;
        assert!((mean / i - 1.0).abs() < 0.1, "{mean} vs {i}");
    }

    #[test]
    fn ball_matches_distance() {
        let m = exp2();
        let p = flat_pair(&m);
        let ball = BallEvent::new(&p, 0.1);
        let tr = simulate(&m, 40.0, 9).unwrap();
        let e = empirical_pair(&tr, 2);
        let d = crate::measures::distance(&e, &p);
        assert!((ball.distance_to(&e) - d).abs() < 1e-12);
    }
}
