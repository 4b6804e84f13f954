//! Candidate pairs `(mu, Q)`: grid representation, constraint classes,
//! derived kernels, relative entropies, distance and regularization.

use serde::{Deserialize, Serialize};

use crate::grid::{QuadGrid, StateGrid};
use crate::model::{stationary_of, strongly_connected, Model};
use crate::simulate::EmpiricalPair;
use crate::{Error, Result};

/// Default relative tolerance for the balance constraints.
pub const DEFAULT_TOL: f64 = 1e-7;

/// Read access shared by grid-based and empirical pairs.
pub trait PairView {
    fn n_states(&self) -> usize;
    fn flow(&self, x: usize, y: usize) -> f64;
    /// `mu(x, 1/tau)`.
    fn inv_tau_mass(&self, x: usize) -> f64;
    /// `mu(x, ]0, inf[)`.
    fn finite_mass(&self, x: usize) -> f64;
    /// `mu(x, {inf})`.
    fn atom(&self, x: usize) -> f64;
    /// Point masses `(tau, mass)` of `mu(x, .)` on `]0, inf[`, sorted by `tau`.
    fn points(&self, x: usize) -> Vec<(f64, f64)>;
    /// `int f dmu(x, .)` over `]0, inf[`.
    fn integrate_mu(&self, x: usize, f: &dyn Fn(f64) -> f64) -> f64;
    /// The quadrature grid the pair lives on, if any.
    fn grid(&self) -> Option<&QuadGrid> {
        None
    }

    fn out_flow(&self, x: usize) -> f64 {
        (0..self.n_states()).map(|y| self.flow(x, y)).sum()
    }
    fn in_flow(&self, x: usize) -> f64 {
        (0..self.n_states()).map(|y| self.flow(y, x)).sum()
    }
    /// State marginal `mu(x, ]0, inf])`.
    fn marginal(&self, x: usize) -> f64 {
        self.finite_mass(x) + self.atom(x)
    }
}

/// `mu(x, d tau) = rho_x(tau) psi_x(d tau) + a_x delta_inf` on a grid, plus `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub grid: QuadGrid,
    /// `rho_x` at the nodes of `grid.states[x]`.
    pub density: Vec<Vec<f64>>,
    pub atoms: Vec<f64>,
    pub flow: Vec<Vec<f64>>,
}

impl PairView for CandidatePair {
    fn n_states(&self) -> usize {
        self.flow.len()
    }
    fn flow(&self, x: usize, y: usize) -> f64 {
        self.flow[x][y]
    }
    fn inv_tau_mass(&self, x: usize) -> f64 {
        let g = self.grid.state(x);
        g.nodes
            .iter()
            .zip(&g.weights)
            .zip(&self.density[x])
            .map(|((t, w), r)| w * r / t)
            .sum()
    }
    fn finite_mass(&self, x: usize) -> f64 {
        self.grid.state(x).dot(&self.density[x])
    }
    fn atom(&self, x: usize) -> f64 {
        self.atoms[x]
    }
    fn points(&self, x: usize) -> Vec<(f64, f64)> {
        let g = self.grid.state(x);
        g.nodes
            .iter()
            .zip(&g.weights)
            .zip(&self.density[x])
            .map(|((&t, w), r)| (t, w * r))
            .collect()
    }
    fn integrate_mu(&self, x: usize, f: &dyn Fn(f64) -> f64) -> f64 {
        let g = self.grid.state(x);
        g.nodes
            .iter()
            .zip(&g.weights)
            .zip(&self.density[x])
            .filter(|(_, r)| **r != 0.0)
            .map(|((&t, w), r)| w * r * f(t))
            .sum()
    }
    fn grid(&self) -> Option<&QuadGrid> {
        Some(&self.grid)
    }
}

impl PairView for EmpiricalPair {
    fn n_states(&self) -> usize {
        self.flow.len()
    }
    fn flow(&self, x: usize, y: usize) -> f64 {
        self.flow[x][y]
    }
    fn inv_tau_mass(&self, x: usize) -> f64 {
        EmpiricalPair::inv_tau_mass(self, x)
    }
    fn finite_mass(&self, x: usize) -> f64 {
        self.atoms.iter().filter(|a| a.state == x).map(|a| a.weight).sum()
    }
    fn atom(&self, _x: usize) -> f64 {
        0.0
    }
    fn points(&self, x: usize) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> =
            self.atoms.iter().filter(|a| a.state == x).map(|a| (a.tau, a.weight)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
    fn integrate_mu(&self, x: usize, f: &dyn Fn(f64) -> f64) -> f64 {
        self.atoms.iter().filter(|a| a.state == x).map(|a| a.weight * f(a.tau)).sum()
    }
}

impl CandidatePair {
    /// Validates shapes, signs and unit total mass (within 1e-9).
    pub fn new(grid: QuadGrid, density: Vec<Vec<f64>>, atoms: Vec<f64>, flow: Vec<Vec<f64>>) -> Result<Self> {
        let n = grid.n_states();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if density.len() != n || atoms.len() != n || flow.len() != n || flow.iter().any(|r| r.len() != n) {
            return bad(format!("pair shapes do not match {n} states"));
        }
        for (x, d) in density.iter().enumerate() {
            if d.len() != grid.state(x).len() {
                return bad(format!("state {x}: {} density values for {} nodes", d.len(), grid.state(x).len()));
            }
            if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("state {x}: density must be finite and nonnegative"));
            }
        }
        if atoms.iter().any(|a| !(a.is_finite() && *a >= 0.0 && *a <= 1.0)) {
            return bad("atoms must lie in [0, 1]".into());
        }
        if flow.iter().flatten().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return bad("flow must be finite and nonnegative".into());
        }
        let pair = CandidatePair { grid, density, atoms, flow };
        let total: f64 = (0..n).map(|x| pair.marginal(x)).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("total mass {total} differs from 1"));
        }
        Ok(pair)
    }

    /// LLN limit `mu(y, d tau) = nu_y tau psi_y(d tau) / E`, `Q = nu p / E`.
    pub fn lln(model: &Model, grid: &QuadGrid) -> Result<CandidatePair> {
        let nu = model.stationary()?;
        let m: f64 = nu.iter().zip(&model.waits).map(|(v, w)| v * w.mean()).sum();
        if !m.is_finite() {
            return Err(Error::LlnUndefined("mean cycle length E_nu(tau_1) is infinite".into()));
        }
        if !grid.matches(&model.waits) {
            return Err(Error::InvalidArgument("grid was built for different wait laws".into()));
        }
        let ones: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![1.0; g.len()]).collect();
        CandidatePair::from_kernel_and_tilts(grid, &model.kernel.rows(), &ones)
    }

    /// LLN limit of the model with kernel `kernel` and waits `g_x psi_x`,
    /// expressed on `grid`. Each `g_x` is renormalized on the grid.
    pub fn from_kernel_and_tilts(grid: &QuadGrid, kernel: &[Vec<f64>], g: &[Vec<f64>]) -> Result<CandidatePair> {
        let n = grid.n_states();
        if kernel.len() != n || g.len() != n {
            return Err(Error::InvalidArgument("kernel or tilt shape mismatch".into()));
        }
        if !strongly_connected(n, |x, y| kernel[x][y] > 0.0) {
            return Err(Error::NotIrreducible("target kernel is not irreducible".into()));
        }
        let nu = stationary_of(n, |x, y| kernel[x][y])?;
        let mut g_norm = Vec::with_capacity(n);
        for (x, gx) in g.iter().enumerate() {
            let z = grid.state(x).dot(gx);
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::InvalidArgument(format!("state {x}: tilt has grid mass {z}")));
            }
            g_norm.push(gx.iter().map(|v| v / z).collect::<Vec<f64>>());
        }
        let e: f64 = (0..n)
            .map(|y| {
                let s = grid.state(y);
                nu[y] * s.nodes.iter().zip(&s.weights).zip(&g_norm[y]).map(|((t, w), v)| t * w * v).sum::<f64>()
            })
            .sum();
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::LlnUndefined(format!("mean cycle length {e}")));
        }
        let density = (0..n)
            .map(|y| {
                let s = grid.state(y);
                s.nodes.iter().zip(&g_norm[y]).map(|(t, v)| nu[y] * t * v / e).collect()
            })
            .collect();
        let flow = (0..n).map(|y| (0..n).map(|z| nu[y] * kernel[y][z] / e).collect()).collect();
        CandidatePair::new(grid.clone(), density, vec![0.0; n], flow)
    }

    /// `mu(x, {tau_i})` for every node.
    pub fn node_masses(&self, x: usize) -> Vec<f64> {
        let g = self.grid.state(x);
        g.weights.iter().zip(&self.density[x]).map(|(w, r)| w * r).collect()
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        (0..self.n_states()).map(|x| self.marginal(x)).collect()
    }

    /// Convex combination `lambda self + (1 - lambda) other` on a shared grid.
    pub fn mix(&self, other: &CandidatePair, lambda: f64) -> Result<CandidatePair> {
        if self.grid != other.grid {
            return Err(Error::InvalidArgument("cannot mix pairs on different grids".into()));
        }
        let lin = |a: f64, b: f64| lambda * a + (1.0 - lambda) * b;
        let zip2 = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(u, v)| lin(*u, *v)).collect()).collect()
        };
        Ok(CandidatePair {
            grid: self.grid.clone(),
            density: zip2(&self.density, &other.density),
            atoms: self.atoms.iter().zip(&other.atoms).map(|(a, b)| lin(*a, *b)).collect(),
            flow: zip2(&self.flow, &other.flow),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<CandidatePair> {
        let p: CandidatePair = serde_json::from_str(s)?;
        CandidatePair::new(p.grid, p.density, p.atoms, p.flow)
    }
}

/// Constraint classes, ordered by inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Membership {
    Ambient,
    U,
    Lambda0,
    U00,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResidual {
    /// `sum_y Q(x, y) - mu(x, 1/tau)`.
    pub kernel_gap: f64,
    /// `sum_y Q(x, y) - sum_y Q(y, x)`.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub class: Membership,
    pub residuals: Vec<StateResidual>,
    /// Absolute tolerance actually applied.
    pub tolerance: f64,
}

impl MembershipReport {
    pub fn summary(&self) -> String {
        let parts: Vec<String> = self
            .residuals
            .iter()
            .enumerate()
            .map(|(x, r)| format!("state {x}: gap {:.3e}, divergence {:.3e}", r.kernel_gap, r.divergence))
            .collect();
        format!("{:?} (tol {:.1e}); {}", self.class, self.tolerance, parts.join("; "))
    }
}

/// Classifies a pair. `tol` is relative to `1 + max_x max(Q(x, E), mu(x, 1/tau))`.
pub fn check_membership<P: PairView + ?Sized>(pair: &P, tol: f64) -> MembershipReport {
    let n = pair.n_states();
    let out: Vec<f64> = (0..n).map(|x| pair.out_flow(x)).collect();
    let inv: Vec<f64> = (0..n).map(|x| pair.inv_tau_mass(x)).collect();
    let scale = 1.0 + out.iter().chain(&inv).copied().fold(0.0, f64::max);
    let tolerance = tol * scale;
    let residuals: Vec<StateResidual> = (0..n)
        .map(|x| StateResidual { kernel_gap: out[x] - inv[x], divergence: out[x] - pair.in_flow(x) })
        .collect();
    let in_u = residuals.iter().all(|r| r.kernel_gap >= -tolerance && r.divergence.abs() <= tolerance);
    let in_l0 = in_u && residuals.iter().all(|r| r.kernel_gap.abs() <= tolerance);
    let in_u00 = in_l0
        && (0..n).all(|x| pair.atom(x) == 0.0 && pair.finite_mass(x) > 0.0)
        && strongly_connected(n, |x, y| pair.flow(x, y) > 0.0);
    let class = if in_u00 {
        Membership::U00
    } else if in_l0 {
        Membership::Lambda0
    } else if in_u {
        Membership::U
    } else {
        Membership::Ambient
    };
    MembershipReport { class, residuals, tolerance }
}

/// `p^Q` and the grid density of `psi^mu` with respect to `psi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedKernels {
    pub p_q: Vec<Vec<f64>>,
    /// `d psi^mu_x / d psi_x` at the nodes.
    pub psi_mu: Vec<Vec<f64>>,
    /// States whose zero row fell back to `(p_x, psi_x)`.
    pub fallback: Vec<bool>,
}

/// Requires `pair` in Lambda_0. `psi^mu_x` is normalized by `mu(x, 1/tau)`,
/// which equals `sum_y Q(x, y)` there.
pub fn derived_kernels(pair: &CandidatePair, model: &Model) -> Result<DerivedKernels> {
    if !pair.grid.matches(&model.waits) {
        return Err(Error::InvalidArgument("pair grid was built for different wait laws".into()));
    }
    let report = check_membership(pair, DEFAULT_TOL);
    if report.class < Membership::Lambda0 {
        return Err(Error::Membership(report.summary()));
    }
    Ok(derived_kernels_unchecked(pair, model))
}

pub(crate) fn derived_kernels_unchecked(pair: &CandidatePair, model: &Model) -> DerivedKernels {
    let n = pair.n_states();
    let mut p_q = Vec::with_capacity(n);
    let mut psi_mu = Vec::with_capacity(n);
    let mut fallback = Vec::with_capacity(n);
    for x in 0..n {
        let out = pair.out_flow(x);
        let k = pair.inv_tau_mass(x);
        let g = pair.grid.state(x);
        if out > 0.0 && k > 0.0 {
            p_q.push(pair.flow[x].iter().map(|q| q / out).collect());
            psi_mu.push(g.nodes.iter().zip(&pair.density[x]).map(|(t, r)| r / (t * k)).collect());
            fallback.push(false);
        } else {
            p_q.push(model.kernel.row(x).to_vec());
            psi_mu.push(vec![1.0; g.len()]);
            fallback.push(true);
        }
    }
    DerivedKernels { p_q, psi_mu, fallback }
}

/// `sum_i nu_i log(nu_i / mu_i)` with `0 log 0 = 0`; `+inf` when `nu` charges
/// a null entry of `mu`.
pub fn rel_entropy_discrete(nu: &[f64], mu: &[f64]) -> f64 {
    assert_eq!(nu.len(), mu.len());
    let mut s = 0.0;
    for (&a, &b) in nu.iter().zip(mu) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntropy {
    pub value: f64,
    pub abs_err: f64,
}

/// `int f log f d psi` on a state grid, for a density `f` with unit grid mass.
pub fn rel_entropy_grid(grid: &StateGrid, f: &[f64]) -> GridEntropy {
    let flogf = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
    let value: f64 = grid.weights.iter().zip(f).map(|(w, &v)| w * flogf(v)).sum();
    let mass = grid.dot(f);
    let edge = f.first().map_or(0.0, |&v| flogf(v).abs()) + f.last().map_or(0.0, |&v| flogf(v).abs());
    let tail = (grid.raw_mass - 1.0).abs().max(1e-16) + grid.weights.first().copied().unwrap_or(0.0);
    let abs_err = (mass - 1.0).abs() * (1.0 + value.abs()) + tail * edge;
    GridEntropy { value: value.max(0.0), abs_err }
}

/// Projects point masses onto grid densities with a Gaussian kernel in
/// `tau`. Mass that finds no node within reach goes to the nearest node.
pub fn to_candidate(emp: &EmpiricalPair, grid: &QuadGrid, bandwidth: f64) -> Result<CandidatePair> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = grid.n_states();
    if emp.n_states() != n {
        return Err(Error::InvalidArgument("state count mismatch".into()));
    }
    let mut masses: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![0.0; g.len()]).collect();
    for a in &emp.atoms {
        let g = grid.state(a.state);
        let lo = g.nodes.partition_point(|&t| t < a.tau - 8.0 * bandwidth);
        let hi = g.nodes.partition_point(|&t| t <= a.tau + 8.0 * bandwidth);
        let k: Vec<f64> = (lo..hi)
            .map(|i| {
                let z = (g.nodes[i] - a.tau) / bandwidth;
                (-0.5 * z * z).exp() * g.widths[i]
            })
            .collect();
        let s: f64 = k.iter().sum();
        if s > 0.0 && s.is_finite() {
            for (i, ki) in (lo..hi).zip(&k) {
                masses[a.state][i] += a.weight * ki / s;
            }
        } else {
            masses[a.state][g.nearest(a.tau)] += a.weight;
        }
    }
    let density = masses
        .iter()
        .zip(&grid.states)
        .map(|(m, g)| m.iter().zip(&g.weights).map(|(m, w)| m / w).collect())
        .collect();
    CandidatePair::new(grid.clone(), density, vec![0.0; n], emp.flow.clone())
}

/// Sum over states of the `L1` distance between cumulative masses in
/// `s = tau / (1 + tau)` plus the gap in total mass, plus `max |Q1 - Q2|`.
pub fn distance<A: PairView + ?Sized, B: PairView + ?Sized>(a: &A, b: &B) -> f64 {
    assert_eq!(a.n_states(), b.n_states());
    let n = a.n_states();
    let mut d = 0.0;
    for x in 0..n {
        d += measure_gap(&a.points(x), a.marginal(x), &b.points(x), b.marginal(x));
    }
    let mut qmax: f64 = 0.0;
    for x in 0..n {
        for y in 0..n {
            qmax = qmax.max((a.flow(x, y) - b.flow(x, y)).abs());
        }
    }
    d + qmax
}

pub(crate) fn measure_gap(pa: &[(f64, f64)], ta: f64, pb: &[(f64, f64)], tb: f64) -> f64 {
    let s = |t: f64| t / (1.0 + t);
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(pa.len() + pb.len());
    events.extend(pa.iter().map(|&(t, m)| (s(t), m)));
    events.extend(pb.iter().map(|&(t, m)| (s(t), -m)));
    events.sort_by(|u, v| u.0.total_cmp(&v.0));
    let mut cum: f64 = 0.0;
    let mut last = 0.0;
    let mut area = 0.0;
    for (pos, m) in events {
        area += cum.abs() * (pos - last);
        cum += m;
        last = pos;
    }
    area += cum.abs() * (1.0 - last);
    area + (ta - tb).abs()
}

/// The anchor `(mu^0, Q^0)`: `mu^0(x) = nu_x tau psi_x(. | A_x) / Z`,
/// `Q^0 = nu p / Z`, with `A_x` the nodes up to the 0.99 quantile.
pub fn regularization_anchor(model: &Model, grid: &QuadGrid) -> Result<CandidatePair> {
    let g: Vec<Vec<f64>> = grid
        .states
        .iter()
        .zip(&model.waits)
        .map(|(s, law)| {
            let q = law.quantile(0.99);
            let mut v: Vec<f64> = s.nodes.iter().map(|&t| if t <= q { 1.0 } else { 0.0 }).collect();
            if v.iter().all(|&u| u == 0.0) {
                v[0] = 1.0;
            }
            v
        })
        .collect();
    CandidatePair::from_kernel_and_tilts(grid, &model.kernel.rows(), &g)
}

/// `eps (mu, Q) + (1 - eps) (mu^0, Q^0)`, then moves any atom at infinity
/// into a far tail set while keeping `mu(x, ]0, inf])` and `mu(x, 1/tau)`.
pub fn regularize(pair: &CandidatePair, eps: f64, model: &Model) -> Result<CandidatePair> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in ]0, 1], got {eps}")));
    }
    if !pair.grid.matches(&model.waits) {
        return Err(Error::InvalidArgument("pair grid was built for different wait laws".into()));
    }
    let report = check_membership(pair, DEFAULT_TOL);
    if report.class < Membership::U {
        return Err(Error::Membership(report.summary()));
    }
    if eps == 1.0 {
        return Ok(pair.clone());
    }
    let anchor = regularization_anchor(model, &pair.grid)?;
    let mut out = pair.mix(&anchor, eps)?;
    for x in 0..out.n_states() {
        let a = out.atoms[x];
        if a == 0.0 {
            continue;
        }
        if model.waits[x].abscissa().is_infinite() {
            return Err(Error::InvalidArgument(format!(
                "state {x}: atom at infinity with infinite abscissa has infinite rate"
            )));
        }
        reallocate_atom(&mut out, x)?;
    }
    CandidatePair::new(out.grid, out.density, out.atoms, out.flow)
}

fn reallocate_atom(pair: &mut CandidatePair, x: usize) -> Result<()> {
    let a = pair.atoms[x];
    let m = pair.finite_mass(x);
    let k = pair.inv_tau_mass(x);
    let g = pair.grid.state(x).clone();
    let law = &pair.grid.laws[x];
    for level in [1e-6, 1e-8] {
        let q = law.quantile(1.0 - level);
        let mut start = g.nodes.partition_point(|&t| t < q);
        if start >= g.len() {
            start = g.len() - 1;
        }
        let w_i: f64 = g.weights[start..].iter().sum();
        let kappa: f64 = g.nodes[start..].iter().zip(&g.weights[start..]).map(|(t, w)| w / t).sum::<f64>() / w_i;
        let alpha = (k - kappa * (m + a)) / (k - kappa * m);
        let beta = (m + a - alpha * m) / a;
        if alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite() {
            for (i, r) in pair.density[x].iter_mut().enumerate() {
                *r *= alpha;
                if i >= start {
                    *r += beta * a / w_i;
                }
            }
            pair.atoms[x] = 0.0;
            return Ok(());
        }
    }
    Err(Error::NonConvergence(format!("state {x}: no tail set reallocates the atom with nonnegative weights")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Kernel, StateSpace};
    use crate::simulate::{empirical_pair, simulate};
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

    #[test]
    fn lln_values() {
        let m = exp2();
        let p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        assert!((p.flow[0][1] - 0.48).abs() < 1e-9, "{}", p.flow[0][1]);
        let r = check_membership(&p, DEFAULT_TOL);
        assert_eq!(r.class, Membership::U00);
        for s in &r.residuals {
            assert!(s.kernel_gap.abs() < 1e-12 && s.divergence.abs() < 1e-12);
        }
        let single = Model::new(
            StateSpace::new(["a"]).unwrap(),
            Kernel::from_rows(vec![vec![1.0]]).unwrap(),
            vec![WaitLaw::exponential(3.0)],
            vec![1.0],
        )
        .unwrap();
        let p = CandidatePair::lln(&single, &QuadGrid::for_model(&single)).unwrap();
        assert!((p.flow[0][0] - 3.0).abs() < 1e-8);
        let g = p.grid.state(0);
        for (t, r) in g.nodes.iter().zip(&p.density[0]) {
            assert!((r / (3.0 * t) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn lln_undefined_for_infinite_mean() {
        let m = Model::new(
            StateSpace::new(["a"]).unwrap(),
            Kernel::from_rows(vec![vec![1.0]]).unwrap(),
            vec![WaitLaw::pareto(0.9, 1.0)],
            vec![1.0],
        )
        .unwrap();
        let e = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap_err();
        assert!(e.to_string().contains("LLN limit undefined"));
    }

    #[test]
    fn membership_classes() {
        let m = exp2();
        let p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        let mut doubled = p.clone();
        for r in doubled.flow.iter_mut() {
            for q in r.iter_mut() {
                *q *= 2.0;
            }
        }
        assert_eq!(check_membership(&doubled, DEFAULT_TOL).class, Membership::U);
        let mut skew = p.clone();
        skew.flow[0][1] += 0.1;
        assert_eq!(check_membership(&skew, DEFAULT_TOL).class, Membership::Ambient);
    }

    #[test]
    fn derived_kernels_of_lln_are_base() {
        let m = exp2();
        let p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        let d = derived_kernels(&p, &m).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert!((d.p_q[x][y] - m.kernel.get(x, y)).abs() < 1e-14);
            }
            assert!(d.psi_mu[x].iter().all(|g| (g - 1.0).abs() < 1e-12));
            assert!((p.grid.state(x).dot(&d.psi_mu[x]) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn derived_kernels_of_tilted_single_state() {
        // psi = Exp(1), psi^h = Exp(3): density 3 e^{-2 tau}.
        let m = Model::new(
            StateSpace::new(["a"]).unwrap(),
            Kernel::from_rows(vec![vec![1.0]]).unwrap(),
            vec![WaitLaw::exponential(1.0)],
            vec![1.0],
        )
        .unwrap();
        let grid = QuadGrid::for_model(&m);
        let gh: Vec<f64> = grid.state(0).nodes.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let p = CandidatePair::from_kernel_and_tilts(&grid, &[vec![1.0]], &[gh.clone()]).unwrap();
        assert!((p.flow[0][0] - 3.0).abs() < 1e-8);
        let d = derived_kernels(&p, &m).unwrap();
        let z = grid.state(0).dot(&gh);
        for (a, b) in d.psi_mu[0].iter().zip(&gh) {
            assert!((a - b / z).abs() < 1e-10 * (1.0 + b));
        }
    }

    #[test]
    fn zero_row_falls_back() {
        let m = exp2();
        let grid = QuadGrid::for_model(&m);
        let mut density = vec![vec![0.0; grid.state(0).len()], vec![0.0; grid.state(1).len()]];
        // All mass at b with a self-loop flow; state a carries nothing.
        let gb = grid.state(1);
        let e: f64 = gb.integrate(|t| t);
        for (r, t) in density[1].iter_mut().zip(&gb.nodes) {
            *r = t / e;
        }
        let pair = CandidatePair::new(grid, density, vec![0.0, 0.0], vec![vec![0.0, 0.0], vec![0.0, 1.0 / e]]).unwrap();
        let d = derived_kernels(&pair, &m).unwrap();
        assert!(d.fallback[0] && !d.fallback[1]);
        assert_eq!(d.p_q[0], vec![0.2, 0.8]);
        assert_eq!(d.p_q[1], vec![0.0, 1.0]);
    }

    #[test]
    fn derived_kernels_rejects_off_lambda0() {
        let m = exp2();
        let mut p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        p.flow[0][1] += 0.1;
        assert!(matches!(derived_kernels(&p, &m), Err(Error::Membership(_))));
    }

    #[test]
    fn discrete_entropy_examples() {
        assert_eq!(rel_entropy_discrete(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((rel_entropy_discrete(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(rel_entropy_discrete(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn grid_entropy_examples() {
        let grid = QuadGrid::new(&[WaitLaw::exponential(1.0)], 400, 1e-10);
        let g = grid.state(0);
        assert_eq!(rel_entropy_grid(g, &vec![1.0; g.len()]).value, 0.0);
        // Exp(2) against Exp(1)
        let f: Vec<f64> = g.nodes.iter().map(|t| 2.0 * (-t).exp()).collect();
        let h = rel_entropy_grid(g, &f);
        assert!((h.value - (2f64.ln() - 0.5)).abs() < 1e-8, "{h:?}");
        assert!(h.abs_err < 1e-8);
        // Uniform on a set of grid mass close to 1/2.
        let med = 2f64.ln();
        let ind: Vec<f64> = g.nodes.iter().map(|&t| if t <= med { 1.0 } else { 0.0 }).collect();
        let pa = g.dot(&ind);
        let f: Vec<f64> = ind.iter().map(|v| v / pa).collect();
        let h = rel_entropy_grid(g, &f);
        assert!((h.value - (1.0 / pa).ln()).abs() < 1e-12);
        assert!((h.value - 2f64.ln()).abs() < 0.05);
        // Exactly psi(A) = 1/2 on a two-point law.
        let two = QuadGrid::new(
            &[WaitLaw::Mixture {
                weights: vec![0.5, 0.5],
                components: vec![WaitLaw::Deterministic { value: 1.0 }, WaitLaw::Deterministic { value: 2.0 }],
            }],
            10,
            1e-10,
        );
        let h = rel_entropy_grid(two.state(0), &[2.0, 0.0]);
        assert!((h.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn smoothing_conserves_mass() {
        let m = exp2();
        let grid = QuadGrid::for_model(&m);
        let tr = simulate(&m, 200.0, 5).unwrap();
        let e = empirical_pair(&tr, 2);
        let c = to_candidate(&e, &grid, 0.05).unwrap();
        let total: f64 = (0..2).map(|x| c.marginal(x)).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(c.flow, e.flow);
        assert!(c.density.iter().flatten().all(|&r| r >= 0.0));
    }

    #[test]
    fn smoothing_single_atom() {
        let m = Model::new(
            StateSpace::new(["a"]).unwrap(),
            Kernel::from_rows(vec![vec![1.0]]).unwrap(),
            vec![WaitLaw::exponential(1.0)],
            vec![1.0],
        )
        .unwrap();
        let grid = QuadGrid::for_model(&m);
        let tr = crate::simulate::Trajectory {
            horizon: 1.0,
            states: vec![0, 0],
            waits: vec![1.5],
            times: vec![1.5],
            n_jumps: 0,
        };
        let mut e = empirical_pair(&tr, 1);
        e.atoms[0].tau = 1.0;
        let bw = 0.1;
        let c = to_candidate(&e, &grid, bw).unwrap();
        let near: f64 = c
            .points(0)
            .iter()
            .filter(|(t, _)| (t - 1.0).abs() <= 3.0 * bw)
            .map(|p| p.1)
            .sum();
        assert!(near >= 0.95, "{near}");
        assert!((c.marginal(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_basics() {
        let m = exp2();
        let p = CandidatePair::lln(&m, &QuadGrid::for_model(&m)).unwrap();
        assert_eq!(distance(&p, &p), 0.0);
        let mut q = p.clone();
        q.flow[1][0] += 0.03;
        assert!((distance(&p, &q) - 0.03).abs() < 1e-15);
        assert_eq!(distance(&p, &q), distance(&q, &p));
    }

    #[test]
    fn regularize_cases() {
        let m = exp2();
        let grid = QuadGrid::for_model(&m);
        let p = CandidatePair::lln(&m, &grid).unwrap();
        assert_eq!(regularize(&p, 1.0, &m).unwrap(), p);
        assert!(regularize(&p, 0.0, &m).is_err());
        assert!(regularize(&p, 1.5, &m).is_err());

        // Zero row at a: all mass at b with a self-loop.
        let mut density = vec![vec![0.0; grid.state(0).len()], vec![0.0; grid.state(1).len()]];
        let gb = grid.state(1);
        let e: f64 = gb.integrate(|t| t);
        for (r, t) in density[1].iter_mut().zip(&gb.nodes) {
            *r = t / e;
        }
        let pair = CandidatePair::new(grid.clone(), density, vec![0.0, 0.0], vec![vec![0.0, 0.0], vec![0.0, 1.0 / e]]).unwrap();
        let r = regularize(&pair, 0.5, &m).unwrap();
        assert!(r.flow[0].iter().all(|&q| q > 0.0));
        assert_eq!(check_membership(&r, DEFAULT_TOL).class, Membership::U00);
    }

    #[test]
    fn regularize_moves_atoms() {
        let m = exp2();
        let grid = QuadGrid::for_model(&m);
        let p = CandidatePair::lln(&m, &grid).unwrap();
        let mut with_atom = p.clone();
        for r in with_atom.density.iter_mut() {
            for v in r.iter_mut() {
                *v *= 0.9;
            }
        }
        for r in with_atom.flow.iter_mut() {
            for v in r.iter_mut() {
                *v *= 0.9;
            }
        }
        with_atom.atoms[1] = 0.1;
        let r = regularize(&with_atom, 0.9, &m).unwrap();
        assert_eq!(r.atoms, vec![0.0, 0.0]);
        assert_eq!(check_membership(&r, DEFAULT_TOL).class, Membership::U00);
        let before = with_atom.mix(&regularization_anchor(&m, &grid).unwrap(), 0.9).unwrap();
        for x in 0..2 {
            assert!((r.marginal(x) - before.marginal(x)).abs() < 1e-12);
            assert!((r.inv_tau_mass(x) - before.inv_tau_mass(x)).abs() < 1e-12);
        }
        let det = Model::new(
            m.states.clone(),
            m.kernel.clone(),
            vec![WaitLaw::exponential(1.0), WaitLaw::Deterministic { value: 1.0 }],
            vec![0.5, 0.5],
        )
        .unwrap();
        let g2 = QuadGrid::for_model(&det);
        let mut q = CandidatePair::lln(&det, &g2).unwrap();
        for v in q.density[1].iter_mut() {
            *v *= 0.5;
        }
        q.atoms[1] = 1.0 - q.marginal(0) - q.finite_mass(1);
        let e = regularize(&q, 0.5, &det).unwrap_err().to_string();
        assert!(e.contains("infinite abscissa"), "{e}");
    }

    #[test]
    fn candidate_json_round_trip() {
        let m = exp2();
        let p = CandidatePair::lln(&m, &QuadGrid::new(&m.waits, 20, 1e-10)).unwrap();
        let back = CandidatePair::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
