//! Finite-graph Markov renewal model: state space, transition kernel,
//! per-state waiting-time laws and initial law.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::waits::WaitLaw;
use crate::{Error, Result};

/// Ordered, distinct state labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidModel("state space must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidModel(format!("duplicate state label {l:?}")));
            }
        }
        Ok(StateSpace { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Square transition matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Kernel {
    n: usize,
    p: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Kernel {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Kernel::from_rows(rows)
    }
}

impl From<Kernel> for Vec<Vec<f64>> {
    fn from(k: Kernel) -> Self {
        k.rows()
    }
}

impl Kernel {
    /// Builds a square matrix; stochasticity is not checked here (see
    /// [`Kernel::violations`]).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidModel("kernel must be non-empty".into()));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::InvalidModel(format!(
                "kernel row {i} has length {}, expected {n}",
                r.len()
            )));
        }
        Ok(Kernel { n, p: rows.into_iter().flatten().collect() })
    }

    pub fn uniform(n: usize) -> Self {
        Kernel { n, p: vec![1.0 / n as f64; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.p[x * self.n + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.p[x * self.n..(x + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.p.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// Strong connectivity of the directed graph of positive entries.
    pub fn is_irreducible(&self) -> bool {
        strongly_connected(self.n, |x, y| self.get(x, y) > 0.0)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for x in 0..self.n {
            let row = self.row(x);
            if let Some(y) = row.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
                out.push(format!("entry ({x},{y}) = {} outside [0,1]", row[y]));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                out.push(format!("row {x} sums to {s}"));
            }
        }
        if !self.is_irreducible() {
            out.push("kernel not irreducible".into());
        }
        out
    }
}

pub(crate) fn strongly_connected(n: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for y in 0..n {
                let e = if forward { edge(x, y) } else { edge(y, x) };
                if e && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n > 0 && reach(true) && reach(false)
}

/// Unique invariant law of an irreducible kernel.
pub fn stationary(kernel: &Kernel) -> Result<Vec<f64>> {
    if !kernel.is_irreducible() {
        return Err(Error::NotIrreducible("kernel graph is not strongly connected".into()));
    }
    stationary_of(kernel.size(), |x, y| kernel.get(x, y))
}

/// Invariant law of a row-stochastic matrix given entrywise.
pub(crate) fn stationary_of(n: usize, p: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>> {
    // (P^T - I) nu = 0 with the last equation replaced by sum(nu) = 1.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = p(j, i) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let mut nu = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NotIrreducible("singular stationary system".into()))?;
    // One step of iterative refinement.
    let r = &b - &a * &nu;
    if let Some(d) = a.lu().solve(&r) {
        nu += d;
    }
    let s: f64 = nu.iter().sum();
    let nu: Vec<f64> = nu.iter().map(|v| v / s).collect();
    if nu.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NotIrreducible(format!("non-positive invariant vector {nu:?}")));
    }
    Ok(nu)
}

/// Outcome of [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// The full model `(p, psi, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub states: StateSpace,
    pub kernel: Kernel,
    pub waits: Vec<WaitLaw>,
    pub initial: Vec<f64>,
}

/// Checks every model invariant and reports all failures.
pub fn validate_model(model: &Model) -> ValidationReport {
    let n = model.states.len();
    let mut violations = Vec::new();
    if model.kernel.size() != n {
        violations.push(format!("kernel is {0}x{0} but there are {n} states", model.kernel.size()));
    } else {
        violations.extend(model.kernel.violations());
    }
    if model.waits.len() != n {
        violations.push(format!("{} wait laws for {n} states", model.waits.len()));
    }
    for (i, w) in model.waits.iter().enumerate() {
        let label = model.states.labels().get(i).map(String::as_str).unwrap_or("?");
        for v in w.violations() {
            violations.push(format!("state {label}: {v}"));
        }
    }
    if model.initial.len() != n {
        violations.push(format!("initial law has {} entries for {n} states", model.initial.len()));
    }
    if model.initial.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        violations.push("initial law has negative or non-finite entries".into());
    }
    let s: f64 = model.initial.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        violations.push(format!("initial law sums to {s}"));
    }
    ValidationReport { ok: violations.is_empty(), violations }
}

impl Model {
    /// Assembles a model without checking invariants.
    pub fn from_parts(states: StateSpace, kernel: Kernel, waits: Vec<WaitLaw>, initial: Vec<f64>) -> Self {
        Model { states, kernel, waits, initial }
    }

    /// Assembles and validates.
    pub fn new(states: StateSpace, kernel: Kernel, waits: Vec<WaitLaw>, initial: Vec<f64>) -> Result<Self> {
        let m = Model::from_parts(states, kernel, waits, initial);
        let report = validate_model(&m);
        if report.ok {
            Ok(m)
        } else {
            Err(Error::InvalidModel(report.violations.join("; ")))
        }
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn stationary(&self) -> Result<Vec<f64>> {
        stationary(&self.kernel)
    }

    /// `E_nu(tau_1) = sum_y nu_y E[tau | y]` under the stationary law.
    pub fn mean_cycle(&self) -> Result<f64> {
        let nu = self.stationary()?;
        Ok(nu.iter().zip(&self.waits).map(|(v, w)| v * w.mean()).sum())
    }

    pub fn abscissas(&self) -> Vec<f64> {
        self.waits.iter().map(WaitLaw::abscissa).collect()
    }

    /// Same waits and initial law with a different kernel.
    pub fn with_kernel(&self, kernel: Kernel) -> Result<Model> {
        Model::new(self.states.clone(), kernel, self.waits.clone(), self.initial.clone())
    }

    pub fn from_config(cfg: ModelConfig) -> Result<Model> {
        let m = Model::from_config_unchecked(cfg)?;
        let report = validate_model(&m);
        if !report.ok {
            return Err(Error::Config(report.violations.join("; ")));
        }
        Ok(m)
    }

    /// Resolves names and shapes but leaves the model invariants to
    /// [`validate_model`].
    pub fn from_config_unchecked(cfg: ModelConfig) -> Result<Model> {
        let states = StateSpace::new(cfg.states.clone()).map_err(|e| Error::Config(format!("states: {e}")))?;
        let kernel = Kernel::from_rows(cfg.kernel).map_err(|e| Error::Config(format!("kernel: {e}")))?;
        let mut waits = Vec::with_capacity(states.len());
        for label in states.labels() {
            let w = cfg
                .waits
                .get(label)
                .ok_or_else(|| Error::Config(format!("waits.{label}: missing wait law")))?;
            waits.push(w.clone());
        }
        if let Some(extra) = cfg.waits.keys().find(|k| states.index_of(k).is_none()) {
            return Err(Error::Config(format!("waits.{extra}: unknown state")));
        }
        let initial = cfg.initial.unwrap_or_else(|| vec![1.0 / states.len() as f64; states.len()]);
        Ok(Model::from_parts(states, kernel, waits, initial))
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            states: self.states.labels().to_vec(),
            kernel: self.kernel.rows(),
            initial: Some(self.initial.clone()),
            waits: self
                .states
                .labels()
                .iter()
                .cloned()
                .zip(self.waits.iter().cloned())
                .collect(),
        }
    }

    /// Parses the TOML model format.
    pub fn from_toml_str(s: &str) -> Result<Model> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Model::from_config(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Model::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_config()).expect("model config serializes")
    }
}

/// On-disk model description.
///
/// ```toml
/// states = ["a", "b"]
/// kernel = [[0.2, 0.8], [0.6, 0.4]]
/// initial = [0.5, 0.5]
///
/// [waits.a]
/// family = "exponential"
/// rate = 1.0
///
/// [waits.b]
/// family = "pareto"
/// index = 1.5
/// scale = 1.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub states: Vec<String>,
    pub kernel: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    pub waits: BTreeMap<String, WaitLaw>,
}

/// A model on edge-states `(x, y)` with `p_{x,y} > 0`.
#[derive(Debug, Clone)]
pub struct DoubledModel {
    pub model: Model,
    /// `pairs[i]` is the original edge of doubled state `i`.
    pub pairs: Vec<(usize, usize)>,
}

/// Lifts a model whose waits depend on the edge `(X_{k}, X_{k+1})` to one on
/// edge-states, where `(x, y) -> (y, z)` has probability `p_{y,z}`.
pub fn double_variables(
    states: &StateSpace,
    kernel: &Kernel,
    initial: &[f64],
    pair_waits: &HashMap<(usize, usize), WaitLaw>,
) -> Result<DoubledModel> {
    if !kernel.is_irreducible() {
        return Err(Error::NotIrreducible("cannot double a reducible kernel".into()));
    }
    let n = kernel.size();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|x| (0..n).map(move |y| (x, y)))
        .filter(|&(x, y)| kernel.get(x, y) > 0.0)
        .collect();
    let mut waits = Vec::with_capacity(pairs.len());
    for &(x, y) in &pairs {
        let w = pair_waits.get(&(x, y)).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no wait law for edge ({}, {})",
                states.label(x),
                states.label(y)
            ))
        })?;
        waits.push(w.clone());
    }
    let m = pairs.len();
    let mut rows = vec![vec![0.0; m]; m];
    for (i, &(_, y)) in pairs.iter().enumerate() {
        for (j, &(y2, z)) in pairs.iter().enumerate() {
            if y2 == y {
                rows[i][j] = kernel.get(y, z);
            }
        }
    }
    let labels: Vec<String> = pairs
        .iter()
        .map(|&(x, y)| format!("{}>{}", states.label(x), states.label(y)))
        .collect();
    let init: Vec<f64> = pairs.iter().map(|&(x, y)| initial[x] * kernel.get(x, y)).collect();
    let model = Model::new(StateSpace::new(labels)?, Kernel::from_rows(rows)?, waits, init)?;
    Ok(DoubledModel { model, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> Model {
        Model::new(
            StateSpace::new(["a", "b"]).unwrap(),
            Kernel::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap(),
            vec![WaitLaw::exponential(1.0), WaitLaw::exponential(2.0)],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn valid_model_passes() {
        assert!(validate_model(&two_state()).ok);
    }

    #[test]
    fn row_sum_violation_is_named() {
        let mut m = two_state();
        m.kernel = Kernel::from_rows(vec![vec![0.5, 0.4], vec![0.6, 0.4]]).unwrap();
        let r = validate_model(&m);
        assert!(!r.ok);
        assert!(r.violations.iter().any(|v| v.contains("row 0 sums to 0.9")), "{r:?}");
    }

    #[test]
    fn identity_kernel_is_reducible() {
        let mut m = two_state();
        m.kernel = Kernel::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = validate_model(&m);
        assert!(r.violations.iter().any(|v| v == "kernel not irreducible"));
        assert!(matches!(stationary(&m.kernel), Err(Error::NotIrreducible(_))));
    }

    #[test]
    fn stationary_examples() {
        let flip = Kernel::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let nu = stationary(&flip).unwrap();
        assert!((nu[0] - 0.5).abs() < 1e-15 && (nu[1] - 0.5).abs() < 1e-15);

        let nu = stationary(&two_state().kernel).unwrap();
        assert!((nu[0] - 3.0 / 7.0).abs() < 1e-14);
        assert!((nu[1] - 4.0 / 7.0).abs() < 1e-14);

        let nu = stationary(&Kernel::uniform(5)).unwrap();
        assert!(nu.iter().all(|v| (v - 0.2).abs() < 1e-14));
    }

    #[test]
    fn doubling_support_restriction() {
        let states = StateSpace::new(["a", "b"]).unwrap();
        let k = Kernel::from_rows(vec![vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let mut pw = HashMap::new();
        for e in [(0, 1), (1, 0), (1, 1)] {
            pw.insert(e, WaitLaw::exponential(1.0));
        }
        let d = double_variables(&states, &k, &[0.5, 0.5], &pw).unwrap();
        assert_eq!(d.pairs, vec![(0, 1), (1, 0), (1, 1)]);
        assert!(d.model.states.index_of("a>a").is_none());
        for row in d.model.kernel.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        pw.remove(&(1, 1));
        assert!(double_variables(&states, &k, &[0.5, 0.5], &pw).is_err());
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = "states = [\"a\", \"b\"]\nkernel = [[0.2, 0.8], [0.6, 0.4]]\n[waits.a]\nfamily = \"exponential\"\nrate = 1.0\n";
        let e = Model::from_toml_str(bad).unwrap_err().to_string();
        assert!(e.contains("waits.b"), "{e}");
        let syntax = "states = [\"a\"\nkernel = 3";
        let e = Model::from_toml_str(syntax).unwrap_err().to_string();
        assert!(e.contains("line"), "{e}");
    }

    #[test]
    fn config_round_trip() {
        let m = two_state();
        let back = Model::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(m, back);
    }
}
