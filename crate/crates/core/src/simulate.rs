//! Trajectory generation and exact empirical measures and flows.
//!
//! Randomness comes from ChaCha8 keyed by a 64-bit master seed. Trajectory
//! `i` of a batch reads stream `i` of that key, so batch output does not
//! depend on how work is scheduled across threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measures::CandidatePair;
use crate::model::Model;
use crate::{Error, Result};

pub type SimRng = ChaCha8Rng;

/// Generator for substream `stream` of master seed `seed`.
pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Draws an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Anything that can drive a Markov renewal trajectory.
pub trait RenewalSampler: Sync {
    fn n_states(&self) -> usize;
    fn sample_initial(&self, rng: &mut SimRng) -> usize;
    fn sample_wait(&self, x: usize, rng: &mut SimRng) -> f64;
    fn sample_jump(&self, x: usize, rng: &mut SimRng) -> usize;
}

impl RenewalSampler for Model {
    fn n_states(&self) -> usize {
        self.n()
    }
    fn sample_initial(&self, rng: &mut SimRng) -> usize {
        sample_categorical(&self.initial, rng)
    }
    fn sample_wait(&self, x: usize, rng: &mut SimRng) -> f64 {
        self.waits[x].sample(rng)
    }
    fn sample_jump(&self, x: usize, rng: &mut SimRng) -> usize {
        sample_categorical(self.kernel.row(x), rng)
    }
}

/// A realized path up to and including the first jump after the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub horizon: f64,
    /// `X_0, ..., X_{N_t + 1}`.
    pub states: Vec<usize>,
    /// `tau_1, ..., tau_{N_t + 1}`.
    pub waits: Vec<f64>,
    /// `S_1, ..., S_{N_t + 1}`.
    pub times: Vec<f64>,
    /// `N_t = inf { n : S_{n+1} > t }`.
    pub n_jumps: usize,
}

impl Trajectory {
    /// `S_n` with `S_0 = 0`.
    pub fn s(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.times[n - 1]
        }
    }

    /// Checks the structural invariants against a model's kernel support.
    pub fn check(&self, model: &Model) -> Result<()> {
        let n = self.n_jumps;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.waits.len() != n + 1 || self.times.len() != n + 1 || self.states.len() != n + 2 {
            return bad("inconsistent trajectory lengths".into());
        }
        if self.waits.iter().any(|&w| !(w > 0.0)) {
            return bad("non-positive wait".into());
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("switching times not strictly increasing".into());
        }
        if !(self.s(n) <= self.horizon && self.horizon < self.s(n + 1)) {
            return bad("horizon not bracketed by S_N and S_{N+1}".into());
        }
        for k in 0..=n {
            if model.kernel.get(self.states[k], self.states[k + 1]) <= 0.0 {
                return bad(format!("jump {k} leaves the kernel support"));
            }
        }
        Ok(())
    }

    /// CSV with columns `k, X_k, tau_{k+1}, S_{k+1}`.
    pub fn write_csv<W: Write>(&self, w: W, labels: &[String]) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["k", "state", "wait", "switch_time"])?;
        for k in 0..=self.n_jumps {
            wtr.write_record([
                k.to_string(),
                labels[self.states[k]].clone(),
                format!("{:?}", self.waits[k]),
                format!("{:?}", self.times[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Simulates under `law` until the first switching time after `t`.
pub fn simulate_with<L: RenewalSampler + ?Sized>(law: &L, t: f64, rng: &mut SimRng) -> Result<Trajectory> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive and finite, got {t}")));
    }
    let mut x = law.sample_initial(rng);
    let mut states = vec![x];
    let mut waits = Vec::new();
    let mut times = Vec::new();
    let mut s = 0.0;
    loop {
        let tau = law.sample_wait(x, rng);
        s += tau;
        x = law.sample_jump(x, rng);
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

/// Simulates `model` on `[0, t]` from substream 0 of `seed`.
pub fn simulate(model: &Model, t: f64, seed: u64) -> Result<Trajectory> {
    simulate_with(model, t, &mut rng_for(seed, 0))
}

/// `count` independent trajectories; trajectory `i` uses substream `i`.
pub fn simulate_batch<L: RenewalSampler + ?Sized>(law: &L, t: f64, seed: u64, count: usize) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| simulate_with(law, t, &mut rng_for(seed, i as u64)))
        .collect()
}

/// One point mass of an empirical measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub state: usize,
    pub tau: f64,
    pub weight: f64,
}

/// Exact `(mu_t, Q_t)` of one trajectory, with the integer counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPair {
    pub horizon: f64,
    pub n_jumps: usize,
    pub atoms: Vec<Atom>,
    pub flow: Vec<Vec<f64>>,
    /// `#{k <= N_t + 1 : (X_{k-1}, X_k) = (x, y)}`.
    pub edge_counts: Vec<Vec<u64>>,
    /// `#{k <= N_t : X_{k-1} = x}`.
    pub completed_visits: Vec<u64>,
    /// `X_{N_t}`.
    pub last_state: usize,
    /// `(t - S_{N_t}) / tau_{N_t + 1}` in `[0, 1]`.
    pub boundary_fraction: f64,
}

/// Builds `(mu_t, Q_t)` from a trajectory on `n_states` states.
pub fn empirical_pair(traj: &Trajectory, n_states: usize) -> EmpiricalPair {
    let t = traj.horizon;
    let n = traj.n_jumps;
    let mut atoms = Vec::with_capacity(n + 1);
    let mut completed_visits = vec![0u64; n_states];
    for k in 1..=n {
        let x = traj.states[k - 1];
        completed_visits[x] += 1;
        atoms.push(Atom { state: x, tau: traj.waits[k - 1], weight: traj.waits[k - 1] / t });
    }
    let last_state = traj.states[n];
    let rest = t - traj.s(n);
    if rest > 0.0 {
        atoms.push(Atom { state: last_state, tau: traj.waits[n], weight: rest / t });
    }
    let mut edge_counts = vec![vec![0u64; n_states]; n_states];
    for k in 1..=n + 1 {
        edge_counts[traj.states[k - 1]][traj.states[k]] += 1;
    }
    let flow = edge_counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64 / t).collect())
        .collect();
    let boundary_fraction = (rest / traj.waits[n]).clamp(0.0, 1.0);
    EmpiricalPair {
        horizon: t,
        n_jumps: n,
        atoms,
        flow,
        edge_counts,
        completed_visits,
        last_state,
        boundary_fraction,
    }
}

impl EmpiricalPair {
    pub fn n_states(&self) -> usize {
        self.flow.len()
    }

    /// `mu_t(x, 1/tau)` from the visit counts.
    pub fn inv_tau_mass(&self, x: usize) -> f64 {
        let extra = if x == self.last_state { self.boundary_fraction } else { 0.0 };
        (self.completed_visits[x] as f64 + extra) / self.horizon
    }

    /// `sum_y Q_t(x, y) - mu_t(x, 1/tau)`, formed in count units first so the
    /// `[0, 1/t]` bound holds in floating point.
    pub fn kernel_gap(&self, x: usize) -> f64 {
        let out: u64 = self.edge_counts[x].iter().sum();
        let v = self.completed_visits[x] as f64;
        let extra = if x == self.last_state { self.boundary_fraction } else { 0.0 };
        (out as f64 - (v + extra)) / self.horizon
    }

    /// `sum_y (Q_t(x, y) - Q_t(y, x))`.
    pub fn divergence(&self, x: usize) -> f64 {
        let out: u64 = self.edge_counts[x].iter().sum();
        let inn: u64 = self.edge_counts.iter().map(|r| r[x]).sum();
        (out as f64 - inn as f64) / self.horizon
    }

    /// `mu_t(1/tau)` over all states.
    pub fn total_inv_tau(&self) -> f64 {
        let v: u64 = self.completed_visits.iter().sum();
        (v as f64 + self.boundary_fraction) / self.horizon
    }

    /// Total weight of `mu_t`.
    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Law-of-large-numbers limit of `(mu_t, Q_t)` on the model's default grid.
pub fn lln_limit(model: &Model) -> Result<CandidatePair> {
    CandidatePair::lln(model, &crate::grid::QuadGrid::for_model(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Kernel, StateSpace};
    use crate::waits::WaitLaw;

    fn det_model() -> Model {
        Model::new(
            StateSpace::new(["a", "b"]).unwrap(),
            Kernel::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            vec![WaitLaw::Deterministic { value: 1.0 }; 2],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    fn exp_single() -> Model {
        Model::new(
            StateSpace::new(["a"]).unwrap(),
            Kernel::from_rows(vec![vec![1.0]]).unwrap(),
            vec![WaitLaw::exponential(1.0)],
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_count() {
        let tr = simulate(&det_model(), 2.5, 1).unwrap();
        assert_eq!(tr.n_jumps, 2);
        assert_eq!(tr.times, vec![1.0, 2.0, 3.0]);
        assert_eq!(tr.states, vec![0, 1, 0, 1]);
        tr.check(&det_model()).unwrap();
    }

    #[test]
    fn boundary_hit_exactly() {
        // S_2 = 2 = t, so N_t = 2 and S_3 = 3 closes the path.
        let tr = simulate(&det_model(), 2.0, 1).unwrap();
        assert_eq!(tr.n_jumps, 2);
        let e = empirical_pair(&tr, 2);
        assert_eq!(e.atoms.len(), 2);
        assert_eq!(e.total_weight(), 1.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = exp_single();
        assert_eq!(simulate(&m, 50.0, 9).unwrap(), simulate(&m, 50.0, 9).unwrap());
        assert_ne!(simulate(&m, 50.0, 9).unwrap(), simulate(&m, 50.0, 10).unwrap());
        let a = simulate_batch(&m, 20.0, 3, 8).unwrap();
        let b = simulate_batch(&m, 20.0, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn renewal_rate() {
        let tr = simulate(&exp_single(), 1e4, 42).unwrap();
        let r = tr.n_jumps as f64 / 1e4;
        assert!((0.97..=1.03).contains(&r), "{r}");
    }

    #[test]
    fn rejects_bad_horizon() {
        assert!(simulate(&exp_single(), 0.0, 1).is_err());
        assert!(simulate(&exp_single(), -1.0, 1).is_err());
    }

    #[test]
    fn hand_example() {
        let tr = Trajectory {
            horizon: 1.0,
            states: vec![0, 1, 0],
            waits: vec![0.5, 0.7],
            times: vec![0.5, 1.2],
            n_jumps: 1,
        };
        let e = empirical_pair(&tr, 2);
        assert_eq!(e.atoms.len(), 2);
        assert_eq!((e.atoms[0].state, e.atoms[0].tau, e.atoms[0].weight), (0, 0.5, 0.5));
        assert_eq!((e.atoms[1].state, e.atoms[1].tau, e.atoms[1].weight), (1, 0.7, 0.5));
        assert_eq!(e.flow, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let total: f64 = e.flow.iter().flatten().sum();
        assert_eq!(total, (tr.n_jumps + 1) as f64 / tr.horizon);
    }

    #[test]
    fn csv_and_json_export() {
        let m = det_model();
        let tr = simulate(&m, 2.5, 1).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, m.states.labels()).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 4);
        assert!(s.starts_with("k,state,wait,switch_time"));
        let e = empirical_pair(&tr, 2);
        let back: EmpiricalPair = serde_json::from_str(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
