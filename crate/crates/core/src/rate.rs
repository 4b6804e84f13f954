//! The rate functional `I(mu, Q)`, its variational family `I_{h,H}`, the
//! Donsker–Varadhan functional and the contracted rate `I_1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::QuadGrid;
use crate::measures::{
    check_membership, derived_kernels_unchecked, rel_entropy_discrete, rel_entropy_grid, CandidatePair,
    Membership, MembershipReport, PairView, DEFAULT_TOL,
};
use crate::model::{Kernel, Model};
use crate::simulate::{rng_for, SimRng};
use crate::{Error, Result};

/// Lower clamp for log-densities turned into bounded test functions.
const LOG_FLOOR: f64 = -700.0;

/// The bounded part `phi_x` of a test function `h_x = phi_x / tau + c 1{tau > M}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    /// `intercept + slope * tau`; bounded only when `slope == 0`.
    Affine { intercept: f64, slope: f64 },
    /// Linear in `tau` between knots, constant outside.
    PiecewiseLinear { knots: Vec<f64>, values: Vec<f64> },
    /// Linear in `log tau` between nodes, constant outside.
    Tabulated { nodes: Vec<f64>, values: Vec<f64> },
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = xs.partition_point(|&k| k < x);
    if i == 0 {
        return ys[0];
    }
    if i == xs.len() {
        return ys[i - 1];
    }
    let (x0, x1) = (xs[i - 1], xs[i]);
    let w = (x - x0) / (x1 - x0);
    ys[i - 1] + w * (ys[i] - ys[i - 1])
}

impl Phi {
    pub fn constant(value: f64) -> Phi {
        Phi::Affine { intercept: value, slope: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Phi::Affine { intercept, slope } => intercept + slope * t,
            Phi::PiecewiseLinear { knots, values } => interp(knots, values, t),
            Phi::Tabulated { nodes, values } => {
                if t <= nodes[0] {
                    values[0]
                } else if t >= nodes[nodes.len() - 1] {
                    values[values.len() - 1]
                } else {
                    let i = nodes.partition_point(|&k| k < t);
                    let (u0, u1) = (nodes[i - 1].ln(), nodes[i].ln());
                    let w = (t.ln() - u0) / (u1 - u0);
                    values[i - 1] + w * (values[i] - values[i - 1])
                }
            }
        }
    }

    /// `lim_{tau -> inf} phi(tau) / tau`.
    pub fn recession(&self) -> f64 {
        match self {
            Phi::Affine { slope, .. } => *slope,
            _ => 0.0,
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Phi::Affine { intercept, slope } => {
                if *slope > 0.0 {
                    f64::INFINITY
                } else {
                    *intercept
                }
            }
            Phi::PiecewiseLinear { values, .. } | Phi::Tabulated { values, .. } => {
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            Phi::Affine { intercept, slope } => {
                if *slope == 0.0 {
                    intercept.abs()
                } else {
                    f64::INFINITY
                }
            }
            Phi::PiecewiseLinear { values, .. } | Phi::Tabulated { values, .. } => {
                values.iter().fold(0.0, |m, v| m.max(v.abs()))
            }
        }
    }

    fn breaks(&self) -> Vec<f64> {
        match self {
            Phi::Affine { .. } => Vec::new(),
            Phi::PiecewiseLinear { knots, .. } => knots.clone(),
            Phi::Tabulated { nodes, .. } => nodes.clone(),
        }
    }

    fn shifted(&self, s: f64) -> Phi {
        match self {
            Phi::Affine { intercept, slope } => Phi::Affine { intercept: intercept + s, slope: *slope },
            Phi::PiecewiseLinear { knots, values } => Phi::PiecewiseLinear {
                knots: knots.clone(),
                values: values.iter().map(|v| v + s).collect(),
            },
            Phi::Tabulated { nodes, values } => Phi::Tabulated {
                nodes: nodes.clone(),
                values: values.iter().map(|v| v + s).collect(),
            },
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            Phi::Affine { intercept, slope } => {
                if !(intercept.is_finite() && slope.is_finite()) {
                    return bad("affine phi must have finite coefficients");
                }
            }
            Phi::PiecewiseLinear { knots: xs, values } | Phi::Tabulated { nodes: xs, values } => {
                if xs.is_empty() || xs.len() != values.len() {
                    return bad("phi knots and values must be non-empty and of equal length");
                }
                if xs.windows(2).any(|w| !(w[0] < w[1])) || !(xs[0] > 0.0) {
                    return bad("phi knots must be positive and strictly increasing");
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("phi values must be finite");
                }
            }
        }
        Ok(())
    }
}

/// A member `(h, H)` of the variational family, with its normalizers
/// `log psi_x(e^{tau h_x})` and `log sum_z p_{x,z} e^{H(x,z)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPair {
    phi: Vec<Phi>,
    c: Vec<f64>,
    m: Vec<f64>,
    h: Vec<Vec<f64>>,
    log_wait_norm: Vec<f64>,
    log_kernel_norm: Vec<f64>,
    /// Why the pair is outside the admissible set, if it is.
    violation: Option<String>,
}

impl TestPair {
    /// Builds a test pair and checks admissibility: `0 <= c_x <= xi_x`
    /// (strict when `xi_x > 0`), `psi_x(e^{tau h_x}) < 1`, and
    /// `sum_z p_{x,z} e^{H(x,z)} < 1`.
    pub fn new(model: &Model, phi: Vec<Phi>, c: Vec<f64>, m: Vec<f64>, h: Vec<Vec<f64>>) -> Result<TestPair> {
        let t = TestPair::build(model, phi, c, m, h)?;
        match &t.violation {
            Some(v) => Err(Error::NotAdmissible(v.clone())),
            None => Ok(t),
        }
    }

    /// Like [`TestPair::new`] but only requires finite normalizers; used
    /// for tilts, which need not satisfy the strict inequalities.
    pub fn tilt(model: &Model, phi: Vec<Phi>, c: Vec<f64>, m: Vec<f64>, h: Vec<Vec<f64>>) -> Result<TestPair> {
        let t = TestPair::build(model, phi, c, m, h)?;
        for x in 0..model.n() {
            if !t.log_wait_norm[x].is_finite() {
                return Err(Error::InfiniteNormalizer(format!(
                    "state {}: psi(e^(tau h)) = {}",
                    model.states.label(x),
                    t.log_wait_norm[x].exp()
                )));
            }
            if !t.log_kernel_norm[x].is_finite() {
                return Err(Error::InfiniteNormalizer(format!(
                    "state {}: kernel normalizer not finite",
                    model.states.label(x)
                )));
            }
        }
        Ok(t)
    }

    fn build(model: &Model, phi: Vec<Phi>, c: Vec<f64>, m: Vec<f64>, h: Vec<Vec<f64>>) -> Result<TestPair> {
        let n = model.n();
        if phi.len() != n || c.len() != n || m.len() != n || h.len() != n || h.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!("test pair shapes do not match {n} states")));
        }
        for p in &phi {
            p.check()?;
        }
        if h.iter().flatten().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidArgument("H entries must be real or -inf".into()));
        }
        let mut violation = None;
        for x in 0..n {
            let xi = model.waits[x].abscissa();
            let label = model.states.label(x);
            let ok = c[x] >= 0.0 && c[x] <= xi && (xi == 0.0 || c[x] < xi) && c[x].is_finite();
            if !ok && violation.is_none() {
                violation = Some(format!("state {label}: c = {} violates 0 <= c < xi = {xi}", c[x]));
            }
            if !(m[x] >= 0.0 && m[x].is_finite()) {
                return Err(Error::InvalidArgument(format!("state {label}: threshold M must be finite and >= 0")));
            }
        }
        let mut t = TestPair { phi, c, m, h, log_wait_norm: vec![0.0; n], log_kernel_norm: vec![0.0; n], violation };
        for x in 0..n {
            t.log_wait_norm[x] = t.exact_log_wait_norm(model, x);
            let row = model.kernel.row(x);
            t.log_kernel_norm[x] = log_sum_exp(
                row.iter().zip(&t.h[x]).filter(|(p, _)| **p > 0.0).map(|(p, hv)| p.ln() + hv),
            );
        }
        if t.violation.is_none() {
            for x in 0..n {
                let label = model.states.label(x);
                if !(t.log_wait_norm[x] < 0.0) {
                    t.violation = Some(format!(
                        "state {label}: psi(e^(tau h)) = {:.6e} is not < 1",
                        t.log_wait_norm[x].exp()
                    ));
                    break;
                }
                if !(t.log_kernel_norm[x] < 0.0) {
                    t.violation = Some(format!(
                        "state {label}: sum_z p e^H = {:.6e} is not < 1",
                        t.log_kernel_norm[x].exp()
                    ));
                    break;
                }
            }
        }
        Ok(t)
    }

    fn exact_log_wait_norm(&self, model: &Model, x: usize) -> f64 {
        let law = &model.waits[x];
        if self.c[x] == 0.0 {
            if let Phi::Affine { intercept, slope } = self.phi[x] {
                return intercept + law.log_mgf(slope);
            }
        }
        let mut breaks = self.phi[x].breaks();
        if self.c[x] > 0.0 {
            breaks.push(self.m[x]);
        }
        law.log_expect(&|t| self.tau_h(x, t), &breaks)
    }

    pub fn n_states(&self) -> usize {
        self.phi.len()
    }
    pub fn phi(&self) -> &[Phi] {
        &self.phi
    }
    pub fn c(&self) -> &[f64] {
        &self.c
    }
    pub fn thresholds(&self) -> &[f64] {
        &self.m
    }
    pub fn h_matrix(&self) -> &[Vec<f64>] {
        &self.h
    }
    pub fn is_admissible(&self) -> bool {
        self.violation.is_none()
    }
    pub fn violation(&self) -> Option<&str> {
        self.violation.as_deref()
    }

    /// `tau h_x(tau)`.
    pub fn tau_h(&self, x: usize, t: f64) -> f64 {
        let jump = if t > self.m[x] { self.c[x] * t } else { 0.0 };
        self.phi[x].eval(t) + jump
    }

    /// `h_x(+inf)`.
    pub fn h_at_infinity(&self, x: usize) -> f64 {
        self.phi[x].recession() + self.c[x]
    }

    /// `log psi_x(e^{tau h_x})`.
    pub fn log_wait_normalizer(&self, x: usize) -> f64 {
        self.log_wait_norm[x]
    }

    /// `log sum_z p_{x,z} e^{H(x,z)}`.
    pub fn log_kernel_normalizer(&self, x: usize) -> f64 {
        self.log_kernel_norm[x]
    }

    /// `log psi_x(e^{tau h_x})` with `psi_x` replaced by its grid rule.
    pub fn grid_log_wait_normalizer(&self, grid: &QuadGrid, x: usize) -> f64 {
        let g = grid.state(x);
        log_sum_exp(g.nodes.iter().zip(&g.weights).map(|(&t, w)| w.ln() + self.tau_h(x, t)))
    }

    /// `max_x sup |phi_x|`.
    pub fn phi_sup_norm(&self) -> f64 {
        self.phi.iter().map(Phi::sup_norm).fold(0.0, f64::max)
    }

    /// Plug-in optimizer for a Lambda_0 pair: `H = log(p^Q / p)`,
    /// `phi = log(d psi^mu / d psi)`, both shifted by `log(1 - delta)`, and
    /// `c = (1 - delta) xi` where the pair has an atom at infinity.
    pub fn near_optimizer(model: &Model, pair: &CandidatePair, delta: f64) -> Result<TestPair> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in ]0, 1[, got {delta}")));
        }
        if !pair.grid.matches(&model.waits) {
            return Err(Error::InvalidArgument("pair grid was built for different wait laws".into()));
        }
        let d = derived_kernels_unchecked(pair, model);
        let shift = (1.0 - delta).ln();
        let n = model.n();
        let mut phi = Vec::with_capacity(n);
        let mut c = vec![0.0; n];
        let mut m = vec![0.0; n];
        let mut h = vec![vec![0.0; n]; n];
        for x in 0..n {
            let g = pair.grid.state(x);
            let values: Vec<f64> = d.psi_mu[x].iter().map(|v| safe_ln(*v) + shift).collect();
            phi.push(Phi::Tabulated { nodes: g.nodes.clone(), values });
            for y in 0..n {
                let p = model.kernel.get(x, y);
                h[x][y] = if p > 0.0 { safe_ln(d.p_q[x][y] / p) + shift } else { 0.0 };
            }
            let xi = model.waits[x].abscissa();
            m[x] = *g.nodes.last().unwrap();
            if pair.atoms[x] > 0.0 && xi.is_finite() && xi > 0.0 {
                c[x] = (1.0 - delta) * xi;
            }
        }
        // Push thresholds out until the exact normalizers drop below 1.
        for _ in 0..64 {
            let t = TestPair::build(model, phi.clone(), c.clone(), m.clone(), h.clone())?;
            if t.is_admissible() {
                return Ok(t);
            }
            if c.iter().all(|&v| v == 0.0) {
                return Err(Error::NotAdmissible(t.violation.unwrap_or_default()));
            }
            for x in 0..n {
                if c[x] > 0.0 {
                    m[x] *= 2.0;
                }
            }
        }
        Err(Error::NotAdmissible("no threshold makes the tail tilt admissible".into()))
    }

    /// A random admissible member: piecewise-linear `phi` with 2 to 6
    /// knots and values in `[-5, 5]`, `c` uniform in `[0, min(0.9 xi, 10)]`,
    /// uniform `H`; `phi` and each row of `H` are then shifted so both
    /// normalizers land in `[e^-1, e^-0.01]`.
    pub fn random(model: &Model, rng: &mut SimRng) -> Result<TestPair> {
        let n = model.n();
        let mut phi = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for law in &model.waits {
            let k = rng.random_range(2..=6);
            let mut ps: Vec<f64> = (0..k).map(|_| rng.random_range(0.001..0.999)).collect();
            ps.sort_by(f64::total_cmp);
            let mut knots: Vec<f64> = ps.iter().map(|&p| law.quantile(p)).collect();
            knots.dedup();
            let values = (0..knots.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            phi.push(Phi::PiecewiseLinear { knots, values });
            let xi = law.abscissa();
            let cmax = (0.9 * xi).min(10.0);
            c.push(if cmax > 0.0 { rng.random_range(0.0..cmax) } else { 0.0 });
            m.push(law.quantile(rng.random_range(0.5..0.999)));
        }
        let mut h: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        for x in 0..n {
            let z = log_sum_exp(
                model.kernel.row(x).iter().zip(&h[x]).filter(|(p, _)| **p > 0.0).map(|(p, v)| p.ln() + v),
            );
            let s = z + rng.random_range(0.01..1.0);
            for v in h[x].iter_mut() {
                *v -= s;
            }
        }
        let probe = TestPair::build(model, phi.clone(), c.clone(), m.clone(), h.clone())?;
        for (x, p) in phi.iter_mut().enumerate() {
            let s = probe.log_wait_norm[x] + rng.random_range(0.01..1.0);
            *p = p.shifted(-s);
        }
        TestPair::new(model, phi, c, m, h)
    }
}

fn safe_ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

pub(crate) fn log_sum_exp(terms: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-state contributions to a rate value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTerms {
    pub kernel: f64,
    pub wait: f64,
    pub atom: f64,
}

impl StateTerms {
    pub fn total(&self) -> f64 {
        self.kernel + self.wait + self.atom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub value: f64,
    pub terms: Vec<StateTerms>,
    pub membership: Option<MembershipReport>,
    /// Quadrature error estimate for the entropy terms.
    pub abs_err: f64,
    /// Objective value after each optimizer sweep.
    pub trace: Vec<f64>,
    /// Minimizing `zeta` for contracted rates.
    pub argmin: Option<Vec<f64>>,
}

/// `I(mu, Q)` with the default balance tolerance.
#[allow(non_snake_case)]
pub fn rate_I(model: &Model, pair: &CandidatePair) -> Result<RateReport> {
    rate_I_with_tol(model, pair, DEFAULT_TOL)
}

/// `sum_x mu(x, 1/tau) [H(p^Q_x | p_x) + H(psi^mu_x | psi_x)] + sum_x xi_x a_x`
/// on Lambda_0 (with `0 * inf = 0`), `+inf` elsewhere.
#[allow(non_snake_case)]
pub fn rate_I_with_tol(model: &Model, pair: &CandidatePair, tol: f64) -> Result<RateReport> {
    if !pair.grid.matches(&model.waits) {
        return Err(Error::InvalidArgument("pair grid was built for different wait laws".into()));
    }
    let report = check_membership(pair, tol);
    if report.class < Membership::Lambda0 {
        return Ok(RateReport {
            value: f64::INFINITY,
            terms: Vec::new(),
            membership: Some(report),
            abs_err: 0.0,
            trace: Vec::new(),
            argmin: None,
        });
    }
    let d = derived_kernels_unchecked(pair, model);
    let mut terms = Vec::with_capacity(model.n());
    let mut abs_err = 0.0;
    for x in 0..model.n() {
        let k = pair.inv_tau_mass(x);
        let (kernel, wait) = if k > 0.0 && !d.fallback[x] {
            let hk = rel_entropy_discrete(&d.p_q[x], model.kernel.row(x));
            let hw = rel_entropy_grid(pair.grid.state(x), &d.psi_mu[x]);
            abs_err += k * hw.abs_err;
            (k * hk, k * hw.value)
        } else {
            (0.0, 0.0)
        };
        let a = pair.atoms[x];
        let atom = if a > 0.0 { a * model.waits[x].abscissa() } else { 0.0 };
        terms.push(StateTerms { kernel, wait, atom });
    }
    let value = terms.iter().map(StateTerms::total).sum();
    Ok(RateReport { value, terms, membership: Some(report), abs_err, trace: Vec::new(), argmin: None })
}

/// `I_{h,H}(mu, Q)`. On grid pairs the wait normalizer is the grid sum, so
/// the entropy inequalities behind `I_{h,H} <= I` hold exactly on the grid.
#[allow(non_snake_case)]
pub fn rate_Ihh<P: PairView + ?Sized>(model: &Model, pair: &P, test: &TestPair) -> Result<f64> {
    if let Some(v) = test.violation() {
        return Err(Error::NotAdmissible(v.to_string()));
    }
    Ok(ihh_value(model, pair, test))
}

pub(crate) fn ihh_value<P: PairView + ?Sized>(model: &Model, pair: &P, test: &TestPair) -> f64 {
    let n = model.n();
    let grid = pair.grid().filter(|g| g.matches(&model.waits));
    let mut total = 0.0;
    for x in 0..n {
        let lz = test.log_kernel_normalizer(x);
        for y in 0..n {
            let q = pair.flow(x, y);
            if q > 0.0 {
                total += q * (test.h[x][y] - lz);
            }
        }
        let lw = match grid {
            Some(g) => test.grid_log_wait_normalizer(g, x),
            None => test.log_wait_normalizer(x),
        };
        let mu_h = pair.integrate_mu(x, &|t| test.tau_h(x, t) / t);
        let a = pair.atom(x);
        let atom = if a > 0.0 { a * test.h_at_infinity(x) } else { 0.0 };
        let out = pair.out_flow(x);
        total += mu_h + atom - if out > 0.0 { out * lw } else { 0.0 };
    }
    total
}

/// Largest `I_{h,H}` over `n_samples` random admissible members and the
/// plug-in near-optimizer with `delta = 1e-3`.
pub fn variational_lb(model: &Model, pair: &CandidatePair, n_samples: usize, seed: u64) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    if check_membership(pair, DEFAULT_TOL).class >= Membership::Lambda0 {
        if let Ok(t) = TestPair::near_optimizer(model, pair, 1e-3) {
            best = ihh_value(model, pair, &t);
        }
    }
    let vals: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            TestPair::random(model, &mut rng).map(|t| ihh_value(model, pair, &t)).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    for v in vals {
        best = best.max(v);
    }
    Ok(best)
}

/// Solution of the Donsker–Varadhan variational problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvSolution {
    pub value: f64,
    /// Optimal `u`, scaled so its largest entry is 1; zero off the support of `zeta`.
    pub u: Vec<f64>,
    /// `Q*(x, y) = zeta_x p_{x,y} u_y / (p u)_x`.
    pub q_star: Vec<Vec<f64>>,
    pub iterations: usize,
    /// `max_y |sum_x Q*(x, y) - zeta_y|`.
    pub residual: f64,
}

/// `I_DV(zeta) = sup_{u > 0} sum_x zeta_x log(u_x / (p u)_x)` for `zeta > 0`.
pub fn donsker_varadhan(kernel: &Kernel, zeta: &[f64]) -> Result<DvSolution> {
    if zeta.len() != kernel.size() || zeta.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
        return Err(Error::InvalidArgument("zeta must be a positive vector of length |E|".into()));
    }
    dv_support(kernel, zeta)
}

/// As [`donsker_varadhan`], allowing zero entries: states with
/// `zeta_x = 0` get `u_x = 0`, which restricts the problem to the support.
pub(crate) fn dv_support(kernel: &Kernel, zeta: &[f64]) -> Result<DvSolution> {
    let n = kernel.size();
    let support: Vec<usize> = (0..n).filter(|&x| zeta[x] > 0.0).collect();
    let total: f64 = zeta.iter().sum();
    let mut sol = DvSolution {
        value: 0.0,
        u: vec![0.0; n],
        q_star: vec![vec![0.0; n]; n],
        iterations: 0,
        residual: 0.0,
    };
    if support.is_empty() {
        return Ok(sol);
    }
    let s = support.len();
    let p: Vec<Vec<f64>> = support.iter().map(|&x| support.iter().map(|&y| kernel.get(x, y)).collect()).collect();
    if p.iter().any(|r| r.iter().all(|&v| v == 0.0)) {
        sol.value = f64::INFINITY;
        return Ok(sol);
    }
    let z: Vec<f64> = support.iter().map(|&x| zeta[x] / total).collect();

    let objective = |v: &[f64]| -> f64 {
        (0..s)
            .map(|i| {
                let lse = log_sum_exp((0..s).filter(|&j| p[i][j] > 0.0).map(|j| p[i][j].ln() + v[j]));
                z[i] * (v[i] - lse)
            })
            .sum()
    };
    // pi[i][j] = p_ij e^{v_j} / sum_k p_ik e^{v_k}
    let transitions = |v: &[f64]| -> Vec<Vec<f64>> {
        let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..s)
            .map(|i| {
                let w: Vec<f64> = (0..s).map(|j| p[i][j] * (v[j] - vmax).exp()).collect();
                let d: f64 = w.iter().sum();
                w.into_iter().map(|x| x / d).collect()
            })
            .collect()
    };
    let gradient = |pi: &[Vec<f64>]| -> Vec<f64> {
        (0..s).map(|j| z[j] - (0..s).map(|i| z[i] * pi[i][j]).sum::<f64>()).collect()
    };

    let mut v = vec![0.0; s];
    // Fixed-point sweeps u_y <- zeta_y / sum_x zeta_x p_xy / (pu)_x as a warm start.
    for _ in 0..20 {
        let pi = transitions(&v);
        for j in 0..s {
            let col: f64 = (0..s).map(|i| z[i] * pi[i][j]).sum();
            if col > 0.0 {
                v[j] += (z[j] / col).ln();
            }
        }
        let v0 = v[0];
        v.iter_mut().for_each(|x| *x -= v0);
        sol.iterations += 1;
    }
    // Newton on the concave objective with v_0 pinned to 0.
    let mut f = objective(&v);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..200 {
        let pi = transitions(&v);
        let g = gradient(&pi);
        grad_norm = g.iter().fold(0.0, |m, x| m.max(x.abs()));
        if grad_norm <= 1e-15 || s == 1 {
            break;
        }
        let r = s - 1;
        let mut neg_h = DMatrix::<f64>::zeros(r, r);
        for i in 0..s {
            for a in 1..s {
                for b in 1..s {
                    let diag = if a == b { pi[i][a] } else { 0.0 };
                    neg_h[(a - 1, b - 1)] += z[i] * (diag - pi[i][a] * pi[i][b]);
                }
            }
        }
        let rhs = DVector::from_iterator(r, g[1..].iter().copied());
        let step: Vec<f64> = match neg_h.cholesky() {
            Some(ch) => std::iter::once(0.0).chain(ch.solve(&rhs).iter().copied()).collect(),
            None => std::iter::once(0.0).chain(g[1..].iter().copied()).collect(),
        };
        let slope: f64 = step.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = v.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            let fc = objective(&cand);
            if fc >= f + 1e-4 * t * slope || (fc - f).abs() <= 1e-16 * (1.0 + f.abs()) {
                v = cand;
                f = fc.max(f);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        sol.iterations += 1;
        if !accepted {
            break;
        }
    }
    let pi = transitions(&v);
    let g = gradient(&pi);
    grad_norm = grad_norm.min(g.iter().fold(0.0, |m, x| m.max(x.abs())));
    if grad_norm > 1e-11 {
        return Err(Error::NonConvergence(format!(
            "Donsker-Varadhan solve stalled with marginal residual {grad_norm:.3e} after {} iterations",
            sol.iterations
        )));
    }
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (i, &x) in support.iter().enumerate() {
        sol.u[x] = (v[i] - vmax).exp();
        for (j, &y) in support.iter().enumerate() {
            sol.q_star[x][y] = zeta[x] * pi[i][j];
        }
    }
    sol.residual = (0..n)
        .map(|y| ((0..n).map(|x| sol.q_star[x][y]).sum::<f64>() - zeta[y]).abs())
        .fold(0.0, f64::max);
    sol.value = (total * objective(&v)).max(0.0);
    Ok(sol)
}

/// Settings for [`rate_I1_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct I1Options {
    pub restarts: usize,
    pub seed: u64,
    /// Stop when a sweep improves the objective by less than this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for I1Options {
    fn default() -> Self {
        I1Options { restarts: 8, seed: 0x5eed, tol: 1e-9, max_sweeps: 400 }
    }
}

/// `I_1(pi) = inf_zeta [I_DV(zeta) + sum_x zeta_x Lambda*_x(pi_x / zeta_x)]`.
#[allow(non_snake_case)]
pub fn rate_I1(model: &Model, pi: &[f64]) -> Result<RateReport> {
    rate_I1_with(model, pi, I1Options::default())
}

/// `zeta_x Lambda*_x(pi_x / zeta_x)`, extended to `zeta_x = 0` by its limit
/// `pi_x xi_x` (with `0 * inf = 0`).
pub fn perspective_term(law: &crate::waits::WaitLaw, pi_x: f64, zeta_x: f64) -> f64 {
    if pi_x == 0.0 {
        return if zeta_x == 0.0 { 0.0 } else { zeta_x * law.legendre(0.0) };
    }
    if zeta_x == 0.0 {
        let xi = law.abscissa();
        return if xi == 0.0 { 0.0 } else { pi_x * xi };
    }
    let l = law.legendre(pi_x / zeta_x);
    if l == 0.0 {
        0.0
    } else {
        zeta_x * l
    }
}

/// Objective of the contraction formula at `zeta`, with its per-state split.
pub fn contraction_objective(model: &Model, pi: &[f64], zeta: &[f64]) -> (f64, Vec<StateTerms>) {
    let dv = dv_support(&model.kernel, zeta).ok();
    let n = model.n();
    let mut terms = Vec::with_capacity(n);
    for x in 0..n {
        let kernel = match &dv {
            Some(sol) if sol.value.is_finite() => {
                if zeta[x] > 0.0 {
                    let pu: f64 = (0..n).map(|y| model.kernel.get(x, y) * sol.u[y]).sum();
                    zeta[x] * (sol.u[x] / pu).ln()
                } else {
                    0.0
                }
            }
            _ => f64::INFINITY,
        };
        let wait = perspective_term(&model.waits[x], pi[x], zeta[x]);
        terms.push(StateTerms { kernel, wait, atom: 0.0 });
    }
    let value = match &dv {
        Some(sol) => sol.value + terms.iter().map(|t| t.wait).sum::<f64>(),
        None => f64::INFINITY,
    };
    (value, terms)
}

#[allow(non_snake_case)]
pub fn rate_I1_with(model: &Model, pi: &[f64], opts: I1Options) -> Result<RateReport> {
    let n = model.n();
    if pi.len() != n || pi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("pi must be a nonnegative vector of length |E|".into()));
    }
    let s: f64 = pi.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("pi sums to {s}, not 1")));
    }
    let base: Vec<f64> = (0..n)
        .map(|x| {
            let m = model.waits[x].mean();
            if pi[x] == 0.0 {
                0.0
            } else if m.is_finite() {
                pi[x] / m
            } else {
                pi[x] * 1e-2
            }
        })
        .collect();
    let mut starts = vec![base.clone()];
    let mut rng = rng_for(opts.seed, 0);
    for _ in 0..opts.restarts {
        starts.push(base.iter().map(|&z| z * rng.random_range(-3.0f64..3.0).exp()).collect());
    }
    let runs: Vec<(f64, Vec<f64>, Vec<f64>)> =
        starts.into_par_iter().map(|z0| coordinate_descent(model, pi, z0, &opts)).collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.0 < runs[best].0 {
            best = i;
        }
    }
    let (value, zeta, trace) = runs.into_iter().nth(best).unwrap();
    let (_, terms) = contraction_objective(model, pi, &zeta);
    Ok(RateReport { value, terms, membership: None, abs_err: 0.0, trace, argmin: Some(zeta) })
}

fn coordinate_descent(model: &Model, pi: &[f64], mut zeta: Vec<f64>, opts: &I1Options) -> (f64, Vec<f64>, Vec<f64>) {
    let n = model.n();
    let dv = |z: &[f64]| dv_support(&model.kernel, z).map(|s| s.value).unwrap_or(f64::INFINITY);
    let mut waits: Vec<f64> = (0..n).map(|x| perspective_term(&model.waits[x], pi[x], zeta[x])).collect();
    let mut best = dv(&zeta) + waits.iter().sum::<f64>();
    let mut trace = vec![best];
    for _ in 0..opts.max_sweeps {
        let before = best;
        for x in 0..n {
            if pi[x] == 0.0 {
                continue;
            }
            let others: f64 = (0..n).filter(|&y| y != x).map(|y| waits[y]).sum();
            let line = |zx: f64| {
                let mut z = zeta.clone();
                z[x] = zx;
                dv(&z) + others + perspective_term(&model.waits[x], pi[x], zx)
            };
            let start = if zeta[x] > 0.0 { zeta[x].ln() } else { (pi[x] * 1e-6).ln() };
            let (s_opt, f_opt) = unimodal_min(|s| line(s.exp()), start);
            let f_zero = line(0.0);
            if f_zero <= f_opt && f_zero <= best {
                zeta[x] = 0.0;
                best = f_zero;
            } else if f_opt < best {
                zeta[x] = s_opt.exp();
                best = f_opt;
            }
            waits[x] = perspective_term(&model.waits[x], pi[x], zeta[x]);
        }
        trace.push(best);
        if !(before - best > opts.tol) {
            break;
        }
    }
    (best, zeta, trace)
}

/// Minimizes a unimodal function of `s` by bracketing from `s0`, then Brent's
/// parabolic search. The search is confined to `s` in `[-700, 700]`.
fn unimodal_min(f: impl Fn(f64) -> f64, s0: f64) -> (f64, f64) {
    const LO: f64 = -700.0;
    const HI: f64 = 700.0;
    let s0 = s0.clamp(LO + 1.0, HI - 1.0);
    let f0 = f(s0);
    let mut step = 0.25;
    let fr = f(s0 + step);
    let dir = if fr < f0 || (f0.is_infinite() && fr.is_finite()) { 1.0 } else { -1.0 };
    // Walk downhill with growing steps until the function rises.
    let mut back = s0 - dir * step;
    let mut prev = s0;
    let mut fprev = f0;
    if dir > 0.0 {
        back = s0;
        prev = s0 + step;
        fprev = fr;
    }
    let (mut a, mut b);
    loop {
        let next = (prev + dir * step).clamp(LO, HI);
        let fnext = f(next);
        if fnext > fprev || next == LO || next == HI || (fnext == fprev && fnext.is_finite()) {
            a = back;
            b = next;
            if fnext < fprev {
                a = prev;
            }
            break;
        }
        back = prev;
        prev = next;
        fprev = fnext;
        step *= 2.0;
    }
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    a = a.max(LO);
    b = b.min(HI);
    let (s, v) = brent(&f, a, b, (prev, fprev));
    if fprev < v {
        (prev, fprev)
    } else {
        (s, v)
    }
}

/// Brent's minimizer on `[a, b]` started from an interior point `(x, f(x))`.
fn brent(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, start: (f64, f64)) -> (f64, f64) {
    const CG: f64 = 0.381_966_011_250_105_1;
    let (mut x, mut fx) = start;
    if !(a < x && x < b) {
        x = a + CG * (b - a);
        fx = f(x);
    }
    let (mut w, mut fw, mut v, mut fv) = (x, fx, x, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol = 1e-10 * x.abs() + 1e-11;
        if (x - m).abs() <= 2.0 * tol - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol && fx.is_finite() && fw.is_finite() && fv.is_finite() {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < 2.0 * tol || b - u < 2.0 * tol {
                    d = if m >= x { tol } else { -tol };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = CG * e;
        }
        let u = if d.abs() >= tol { x + d } else { x + tol.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateSpace;
    use crate::waits::WaitLaw;

    fn exp2() -> Model {
        Model::new(
            StateSpace::new(["a", "b"]).unwrap(),
            Kernel::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap(),
            vec![WaitLaw::exponential(1.0), WaitLaw::exponential(2.0)],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn pareto2() -> Model {
        Model::new(
            StateSpace::new(["a", "b"]).unwrap(),
            Kernel::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap(),
            vec![WaitLaw::pareto(1.5, 1.0), WaitLaw::exponential(1.0)],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn flat_pair(m: &Model) -> CandidatePair {
        let grid = QuadGrid::for_model(m);
        let ones: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![1.0; g.len()]).collect();
        CandidatePair::from_kernel_and_tilts(&grid, &[vec![0.5, 0.5], vec![0.5, 0.5]], &ones).unwrap()
    }

    #[test]
    fn zero_at_lln() {
        for m in [exp2(), pareto2()] {
            let p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
            let r = rate_I(&m, &p).unwrap();
            assert!(r.value.abs() <= 1e-8, "{}", r.value);
        }
    }

    #[test]
    fn flat_kernel_rate() {
        let m = exp2();
        let p = flat_pair(&m);
        let r = rate_I(&m, &p).unwrap();
        // nu' = (1/2, 1/2), E' = 3/4, so mu(x, 1/tau) = 2/3 per state.
        let ha = 0.5 * (0.5f64 / 0.2).ln() + 0.5 * (0.5f64 / 0.8).ln();
        let hb = 0.5 * (0.5f64 / 0.6).ln() + 0.5 * (0.5f64 / 0.4).ln();
        let expect = 2.0 / 3.0 * (ha + hb);
        assert!((ha - 0.223144).abs() < 1e-6);
        assert!((r.value - expect).abs() < 1e-9, "{} vs {expect}", r.value);
        assert!(r.terms.iter().all(|t| t.wait.abs() < 1e-12));
        let sum: f64 = r.terms.iter().map(StateTerms::total).sum();
        assert_eq!(sum, r.value);
    }

    #[test]
    fn off_lambda0_is_infinite() {
        let m = exp2();
        let mut p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        p.flow[0][1] += 0.1;
        assert_eq!(rate_I(&m, &p).unwrap().value, f64::INFINITY);
    }

    #[test]
    fn atom_term() {
        for (m, add) in [(exp2(), 0.2), (pareto2(), 0.0)] {
            let mut p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
            for r in p.density.iter_mut().chain(p.flow.iter_mut()) {
                r.iter_mut().for_each(|v| *v *= 0.9);
            }
            // Exp(2) sits at b in exp2; Pareto at a in pareto2.
            let x = if add > 0.0 { 1 } else { 0 };
            p.atoms[x] = 0.1;
            let r = rate_I(&m, &p).unwrap();
            assert!((r.value - add).abs() < 1e-9, "{}", r.value);
        }
    }

    #[test]
    fn ihh_cancels_on_lambda0_for_constants() {
        let m = exp2();
        let p = flat_pair(&m);
        let t = TestPair::new(
            &m,
            vec![Phi::constant(-0.3), Phi::constant(-0.3)],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![vec![-0.2; 2]; 2],
        )
        .unwrap();
        assert!(rate_Ihh(&m, &p, &t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ihh_grows_with_penalty() {
        let m = exp2();
        let mut p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        for r in p.flow.iter_mut() {
            r.iter_mut().for_each(|v| *v *= 1.5);
        }
        let gap = p.out_flow(0) - p.inv_tau_mass(0);
        let mk = |big: f64| {
            TestPair::new(
                &m,
                vec![Phi::constant(-big), Phi::constant(-1.0)],
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![vec![-0.1; 2]; 2],
            )
            .unwrap()
        };
        let v1 = rate_Ihh(&m, &p, &mk(1e3)).unwrap();
        let v2 = rate_Ihh(&m, &p, &mk(2e3)).unwrap();
        assert!(v1 >= 1e3 * gap * 0.99);
        assert!(((v2 - v1) / 1e3 - gap).abs() < 1e-9);
    }

    #[test]
    fn inadmissible_is_named() {
        let m = exp2();
        let e = TestPair::new(&m, vec![Phi::constant(0.1), Phi::constant(-1.0)], vec![0.0; 2], vec![0.0; 2], vec![vec![-1.0; 2]; 2])
            .unwrap_err()
            .to_string();
        assert!(e.contains("state a") && e.contains("psi"), "{e}");
        let e = TestPair::new(&m, vec![Phi::constant(-1.0); 2], vec![0.0; 2], vec![0.0; 2], vec![vec![0.0; 2]; 2])
            .unwrap_err()
            .to_string();
        assert!(e.contains("sum_z p e^H"), "{e}");
        let e = TestPair::new(&m, vec![Phi::constant(-1.0); 2], vec![1.0, 0.0], vec![1.0; 2], vec![vec![-1.0; 2]; 2])
            .unwrap_err()
            .to_string();
        assert!(e.contains("xi"), "{e}");
    }

    #[test]
    fn random_members_are_dominated() {
        let m = exp2();
        let p = flat_pair(&m);
        let i = rate_I(&m, &p).unwrap().value;
        let mut rng = rng_for(7, 0);
        for _ in 0..50 {
            let t = TestPair::random(&m, &mut rng).unwrap();
            assert!(rate_Ihh(&m, &p, &t).unwrap() <= i + 1e-9);
        }
    }

    #[test]
    fn variational_bound() {
        let m = exp2();
        let lln = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        let lb = variational_lb(&m, &lln, 20, 1).unwrap();
        assert!(lb.abs() <= 1e-8, "{lb}");
        let p = flat_pair(&m);
        let i = rate_I(&m, &p).unwrap().value;
        let lb = variational_lb(&m, &p, 20, 1).unwrap();
        assert!(lb <= i + 1e-6 && lb >= 0.99 * i, "{lb} vs {i}");
    }

    #[test]
    fn dv_examples() {
        let k = exp2().kernel;
        let nu = crate::model::stationary(&k).unwrap();
        let s = donsker_varadhan(&k, &nu).unwrap();
        assert!(s.value.abs() < 1e-14);
        assert!((s.u[0] - s.u[1]).abs() < 1e-12);

        let z = [0.5, 0.5];
        let s = donsker_varadhan(&k, &z).unwrap();
        let mut best = f64::NEG_INFINITY;
        let npts = 200_000;
        for i in 0..=npts {
            let r = (-3.0 + 6.0 * i as f64 / npts as f64) * std::f64::consts::LN_10;
            let ub = r.exp();
            let v = 0.5 * (1.0 / (0.2 + 0.8 * ub)).ln() + 0.5 * (ub / (0.6 + 0.4 * ub)).ln();
            best = best.max(v);
        }
        assert!((s.value - best).abs() < 1e-6, "{} vs {best}", s.value);
        for y in 0..2 {
            let col: f64 = (0..2).map(|x| s.q_star[x][y]).sum();
            let row: f64 = s.q_star[y].iter().sum();
            assert!((col - z[y]).abs() < 1e-10 && (row - z[y]).abs() < 1e-10);
        }
        let s2 = donsker_varadhan(&k, &[1.0, 1.0]).unwrap();
        assert!((s2.value - 2.0 * s.value).abs() < 1e-10);
        assert!(donsker_varadhan(&k, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn i1_zero_at_marginal() {
        let m = exp2();
        let p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        let r = rate_I1(&m, &p.state_marginal()).unwrap();
        assert!(r.value.abs() < 1e-6, "{}", r.value);
    }

    #[test]
    fn i1_heavy_tail_zero() {
        let r = rate_I1(&pareto2(), &[1.0, 0.0]).unwrap();
        assert!(r.value.abs() < 1e-6, "{}", r.value);
        let r = rate_I1(&exp2(), &[1.0, 0.0]).unwrap();
        assert!(r.value > 0.1, "{}", r.value);
    }

    #[test]
    fn i1_rejects_off_simplex() {
        assert!(rate_I1(&exp2(), &[0.5, 0.6]).is_err());
        assert!(rate_I1(&exp2(), &[-0.5, 1.5]).is_err());
    }
}
