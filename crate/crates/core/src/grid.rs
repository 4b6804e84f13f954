//! Per-state quadrature grids for integrating against the waiting laws.

use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::quad;
use crate::waits::WaitLaw;

pub const DEFAULT_NODES: usize = 400;
pub const DEFAULT_TAIL: f64 = 1e-10;

/// Quadrature rule for one state's waiting law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    /// Increasing node positions in `tau`.
    pub nodes: Vec<f64>,
    /// `psi`-mass carried by each node; sums to 1.
    pub weights: Vec<f64>,
    /// Lebesgue cell width `weight / pdf(node)`; zero at atoms of `psi`.
    pub widths: Vec<f64>,
    /// Total weight before renormalization.
    pub raw_mass: f64,
}

impl StateGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_i w_i f(tau_i)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, w)| w * f(t)).sum()
    }

    /// `sum_i w_i v_i` for values already on the nodes.
    pub fn dot(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Index of the node closest to `t` in `log t`.
    pub fn nearest(&self, t: f64) -> usize {
        let lt = t.ln();
        let i = self.nodes.partition_point(|&n| n < t);
        match i {
            0 => 0,
            i if i == self.nodes.len() => i - 1,
            i => {
                if (self.nodes[i].ln() - lt).abs() < (lt - self.nodes[i - 1].ln()).abs() {
                    i
                } else {
                    i - 1
                }
            }
        }
    }
}

/// Grids for every state of a model, tied to the laws they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadGrid {
    pub states: Vec<StateGrid>,
    pub laws: Vec<WaitLaw>,
    pub tail_quantile: f64,
    pub nodes_per_state: usize,
}

impl QuadGrid {
    pub fn for_model(model: &Model) -> QuadGrid {
        QuadGrid::new(&model.waits, DEFAULT_NODES, DEFAULT_TAIL)
    }

    /// Gauss–Legendre in `log tau` between the `tail` and `1 - tail`
    /// quantiles, plus one node per tail carrying its mass.
    pub fn new(laws: &[WaitLaw], nodes: usize, tail: f64) -> QuadGrid {
        assert!(nodes >= 2 && tail > 0.0 && tail < 0.5);
        let states = laws.iter().map(|l| state_grid(l, nodes, tail)).collect();
        QuadGrid { states, laws: laws.to_vec(), tail_quantile: tail, nodes_per_state: nodes }
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, x: usize) -> &StateGrid {
        &self.states[x]
    }

    /// Whether the grid was built for exactly these laws.
    pub fn matches(&self, laws: &[WaitLaw]) -> bool {
        self.laws == laws
    }
}

fn state_grid(law: &WaitLaw, n: usize, tail: f64) -> StateGrid {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    collect_nodes(law, 1.0, n, tail, &mut pts);
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Merge coincident nodes (e.g. repeated atoms in a mixture).
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (t, w) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == t => last.1 += w,
            _ => merged.push((t, w)),
        }
    }
    let raw_mass: f64 = merged.iter().map(|p| p.1).sum();
    let nodes: Vec<f64> = merged.iter().map(|p| p.0).collect();
    let weights: Vec<f64> = merged.iter().map(|p| p.1 / raw_mass).collect();
    let widths = nodes
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| {
            let lp = law.ln_pdf(t);
            if is_atom(law, t) || lp == f64::NEG_INFINITY {
                0.0
            } else {
                w / lp.exp()
            }
        })
        .collect();
    StateGrid { nodes, weights, widths, raw_mass }
}

fn is_atom(law: &WaitLaw, t: f64) -> bool {
    match law {
        WaitLaw::Deterministic { value } => *value == t,
        WaitLaw::Mixture { components, .. } => components.iter().any(|c| is_atom(c, t)),
        _ => false,
    }
}

fn collect_nodes(law: &WaitLaw, scale: f64, n: usize, tail: f64, out: &mut Vec<(f64, f64)>) {
    match law {
        WaitLaw::Deterministic { value } => out.push((*value, scale)),
        WaitLaw::Mixture { weights, components } => {
            for (w, c) in weights.iter().zip(components) {
                collect_nodes(c, scale * w, n, tail, out);
            }
        }
        _ => {
            let lo = law.quantile(tail);
            let hi = law.quantile(1.0 - tail);
            let (ul, uh) = (lo.ln(), hi.ln());
            let (x, w) = quad::gauss_legendre(n);
            let half = 0.5 * (uh - ul);
            let mid = 0.5 * (uh + ul);
            for (xi, wi) in x.iter().zip(&w) {
                let u = mid + half * xi;
                let t = u.exp();
                out.push((t, scale * wi * half * (law.ln_pdf(t) + u).exp()));
            }
            out.push((law.quantile(0.5 * tail), scale * tail));
            out.push((upper_tail_mean(law, hi, tail), scale * tail));
        }
    }
}

/// `E[tau | tau > q]` where `P(tau > q) = tail`; falls back to a tail
/// quantile when the first moment diverges.
fn upper_tail_mean(law: &WaitLaw, q: f64, tail: f64) -> f64 {
    match *law {
        WaitLaw::Pareto { index, .. } if index > 1.0 => index * q / (index - 1.0),
        WaitLaw::Exponential { rate } => q + 1.0 / rate,
        _ if law.mean().is_infinite() => law.quantile(1.0 - 0.5 * tail),
        _ => {
            // E[tau; tau > q] = q sf(q) + int_q^inf sf(s) ds, in log s.
            let sf_q = law.sf(q);
            if !(sf_q > 0.0) {
                return q;
            }
            let lq = q.ln();
            let r = quad::integrate(|u: f64| law.sf(u.exp()) * u.exp(), lq, lq + 50.0, &[], 0.0, 1e-12);
            q + r.value / sf_q
        }
    }
}
