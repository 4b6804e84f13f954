//! Waiting-time laws on `]0, +inf[`: densities, tails, sampling, moments,
//! the log-moment generating function and its Legendre transform.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::{erf::erfc, gamma};

use crate::quad;

/// A holding-time distribution attached to a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WaitLaw {
    Exponential { rate: f64 },
    Gamma { shape: f64, scale: f64 },
    Pareto { index: f64, scale: f64 },
    #[serde(rename = "lognormal")]
    LogNormal { location: f64, scale: f64 },
    Weibull { shape: f64, scale: f64 },
    Deterministic { value: f64 },
    Mixture { weights: Vec<f64>, components: Vec<WaitLaw> },
}

/// Log-MGF together with its first two derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMgf {
    pub value: f64,
    pub slope: f64,
    pub curvature: f64,
}

impl LogMgf {
    const INFINITE: LogMgf = LogMgf {
        value: f64::INFINITY,
        slope: f64::INFINITY,
        curvature: f64::INFINITY,
    };
}

// Below this many nats under the peak the integrand is ignored.
const LOG_CUTOFF: f64 = 60.0;
const SCAN_POINTS: usize = 600;

fn log_sum_exp(terms: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl WaitLaw {
    pub fn exponential(rate: f64) -> Self {
        WaitLaw::Exponential { rate }
    }

    pub fn pareto(index: f64, scale: f64) -> Self {
        WaitLaw::Pareto { index, scale }
    }

    pub fn family(&self) -> &'static str {
        match self {
            WaitLaw::Exponential { .. } => "exponential",
            WaitLaw::Gamma { .. } => "gamma",
            WaitLaw::Pareto { .. } => "pareto",
            WaitLaw::LogNormal { .. } => "lognormal",
            WaitLaw::Weibull { .. } => "weibull",
            WaitLaw::Deterministic { .. } => "deterministic",
            WaitLaw::Mixture { .. } => "mixture",
        }
    }

    /// Parameter checks; returns one message per violation.
    pub fn violations(&self) -> Vec<String> {
        fn positive(out: &mut Vec<String>, fam: &str, name: &str, v: f64) {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{fam}: parameter {name}={v} must be finite and > 0"));
            }
        }
        let mut out = Vec::new();
        let fam = self.family();
        match self {
            WaitLaw::Exponential { rate } => positive(&mut out, fam, "rate", *rate),
            WaitLaw::Gamma { shape, scale } | WaitLaw::Weibull { shape, scale } => {
                positive(&mut out, fam, "shape", *shape);
                positive(&mut out, fam, "scale", *scale);
            }
            WaitLaw::Pareto { index, scale } => {
                positive(&mut out, fam, "index", *index);
                positive(&mut out, fam, "scale", *scale);
            }
            WaitLaw::LogNormal { location, scale } => {
                if !location.is_finite() {
                    out.push(format!("lognormal: location={location} must be finite"));
                }
                positive(&mut out, fam, "scale", *scale);
            }
            WaitLaw::Deterministic { value } => positive(&mut out, fam, "value", *value),
            WaitLaw::Mixture { weights, components } => {
                if components.is_empty() || weights.len() != components.len() {
                    out.push("mixture: weights and components must be non-empty and of equal length".into());
                }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    out.push("mixture: weights must be positive".into());
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    out.push(format!("mixture: weights sum to {s}, expected 1"));
                }
                for (i, c) in components.iter().enumerate() {
                    for v in c.violations() {
                        out.push(format!("mixture component {i}: {v}"));
                    }
                }
            }
        }
        out
    }

    /// Log-density with respect to Lebesgue measure. For mixtures only the
    /// absolutely continuous components contribute; a deterministic law has
    /// no Lebesgue density and returns `-inf`.
    pub fn ln_pdf(&self, t: f64) -> f64 {
        if !(t > 0.0) || !t.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            WaitLaw::Exponential { rate } => rate.ln() - rate * t,
            WaitLaw::Gamma { shape, scale } => {
                -gamma::ln_gamma(shape) - shape * scale.ln() + (shape - 1.0) * t.ln() - t / scale
            }
            WaitLaw::Pareto { index, scale } => {
                if t < scale {
                    f64::NEG_INFINITY
                } else {
                    index.ln() + index * scale.ln() - (index + 1.0) * t.ln()
                }
            }
            WaitLaw::LogNormal { location, scale } => {
                let z = (t.ln() - location) / scale;
                -t.ln() - scale.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
            }
            WaitLaw::Weibull { shape, scale } => {
                let r = t / scale;
                (shape / scale).ln() + (shape - 1.0) * r.ln() - r.powf(shape)
            }
            WaitLaw::Deterministic { .. } => f64::NEG_INFINITY,
            WaitLaw::Mixture { ref weights, ref components } => log_sum_exp(
                weights.iter().zip(components).map(|(w, c)| w.ln() + c.ln_pdf(t)),
            ),
        }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        self.ln_pdf(t).exp()
    }

    /// `P(tau <= t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        if !(t > 0.0) {
            return 0.0;
        }
        if t == f64::INFINITY {
            return 1.0;
        }
        match *self {
            WaitLaw::Exponential { rate } => -(-rate * t).exp_m1(),
            WaitLaw::Gamma { shape, scale } => gamma::gamma_lr(shape, t / scale),
            WaitLaw::Pareto { .. } | WaitLaw::Weibull { .. } | WaitLaw::LogNormal { .. } => {
                1.0 - self.sf(t)
            }
            WaitLaw::Deterministic { value } => {
                if t >= value {
                    1.0
                } else {
                    0.0
                }
            }
            WaitLaw::Mixture { ref weights, ref components } => {
                weights.iter().zip(components).map(|(w, c)| w * c.cdf(t)).sum()
            }
        }
    }

    /// `P(tau > t)`.
    pub fn sf(&self, t: f64) -> f64 {
        if !(t > 0.0) {
            return 1.0;
        }
        match *self {
            WaitLaw::Exponential { rate } => (-rate * t).exp(),
            WaitLaw::Gamma { shape, scale } => gamma::gamma_ur(shape, t / scale),
            WaitLaw::Pareto { index, scale } => {
                if t < scale {
                    1.0
                } else {
                    (scale / t).powf(index)
                }
            }
            WaitLaw::LogNormal { location, scale } => {
                0.5 * erfc((t.ln() - location) / (scale * std::f64::consts::SQRT_2))
            }
            WaitLaw::Weibull { shape, scale } => (-(t / scale).powf(shape)).exp(),
            WaitLaw::Deterministic { value } => {
                if t >= value {
                    0.0
                } else {
                    1.0
                }
            }
            WaitLaw::Mixture { ref weights, ref components } => {
                weights.iter().zip(components).map(|(w, c)| w * c.sf(t)).sum()
            }
        }
    }

    /// Smallest `t` with `cdf(t) >= p`, by bisection in `log t`. Uses the
    /// survival function above the median to keep upper-tail precision.
    pub fn quantile(&self, p: f64) -> f64 {
        if let WaitLaw::Deterministic { value } = *self {
            return value;
        }
        let p = p.clamp(0.0, 1.0);
        if p == 0.0 {
            return self.support_min();
        }
        if p == 1.0 {
            return f64::INFINITY;
        }
        let (mut lo, mut hi) = self.scan_range();
        let below = |u: f64| -> bool {
            let t = u.exp();
            if p <= 0.5 {
                self.cdf(t) < p
            } else {
                self.sf(t) > 1.0 - p
            }
        };
        while below(hi) && hi < 700.0 {
            hi += 2.0;
        }
        while !below(lo) && lo > -700.0 {
            lo -= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if below(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 * (1.0 + hi.abs()) {
                break;
            }
        }
        hi.exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            WaitLaw::Exponential { rate } => rand_distr::Exp::new(rate).unwrap().sample(rng),
            WaitLaw::Gamma { shape, scale } => {
                rand_distr::Gamma::new(shape, scale).unwrap().sample(rng)
            }
            WaitLaw::Pareto { index, scale } => {
                rand_distr::Pareto::new(scale, index).unwrap().sample(rng)
            }
            WaitLaw::LogNormal { location, scale } => {
                rand_distr::LogNormal::new(location, scale).unwrap().sample(rng)
            }
            WaitLaw::Weibull { shape, scale } => {
                rand_distr::Weibull::new(scale, shape).unwrap().sample(rng)
            }
            WaitLaw::Deterministic { value } => value,
            WaitLaw::Mixture { ref weights, ref components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (w, c) in weights.iter().zip(components) {
                    acc += w;
                    if u < acc {
                        return c.sample(rng);
                    }
                }
                components.last().unwrap().sample(rng)
            }
        }
    }

    /// Expected waiting time; `+inf` when the first moment diverges.
    pub fn mean(&self) -> f64 {
        match *self {
            WaitLaw::Exponential { rate } => 1.0 / rate,
            WaitLaw::Gamma { shape, scale } => shape * scale,
            WaitLaw::Pareto { index, scale } => {
                if index <= 1.0 {
                    f64::INFINITY
                } else {
                    index * scale / (index - 1.0)
                }
            }
            WaitLaw::LogNormal { location, scale } => (location + 0.5 * scale * scale).exp(),
            WaitLaw::Weibull { shape, scale } => scale * gamma::gamma(1.0 + 1.0 / shape),
            WaitLaw::Deterministic { value } => value,
            WaitLaw::Mixture { ref weights, ref components } => {
                weights.iter().zip(components).map(|(w, c)| w * c.mean()).sum()
            }
        }
    }

    /// Exponential-moment abscissa `sup { c >= 0 : E[e^{c tau}] < inf }`.
    pub fn abscissa(&self) -> f64 {
        match *self {
            WaitLaw::Exponential { rate } => rate,
            WaitLaw::Gamma { scale, .. } => 1.0 / scale,
            WaitLaw::Pareto { .. } | WaitLaw::LogNormal { .. } => 0.0,
            WaitLaw::Weibull { shape, scale } => {
                if shape < 1.0 {
                    0.0
                } else if shape == 1.0 {
                    1.0 / scale
                } else {
                    f64::INFINITY
                }
            }
            WaitLaw::Deterministic { .. } => f64::INFINITY,
            WaitLaw::Mixture { ref components, .. } => components
                .iter()
                .map(WaitLaw::abscissa)
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Whether `E[e^{xi tau}]` itself is finite at the abscissa `xi`.
    pub fn finite_at_abscissa(&self) -> bool {
        match self {
            WaitLaw::Pareto { .. } | WaitLaw::LogNormal { .. } => true,
            WaitLaw::Weibull { shape, .. } => *shape < 1.0,
            WaitLaw::Exponential { .. } | WaitLaw::Gamma { .. } => false,
            WaitLaw::Deterministic { .. } => true,
            WaitLaw::Mixture { components, .. } => {
                let xi = self.abscissa();
                components
                    .iter()
                    .filter(|c| c.abscissa() == xi)
                    .all(WaitLaw::finite_at_abscissa)
            }
        }
    }

    /// Infimum of the support.
    pub fn support_min(&self) -> f64 {
        match *self {
            WaitLaw::Pareto { scale, .. } => scale,
            WaitLaw::Deterministic { value } => value,
            WaitLaw::Mixture { ref components, .. } => components
                .iter()
                .map(WaitLaw::support_min)
                .fold(f64::INFINITY, f64::min),
            _ => 0.0,
        }
    }

    /// Supremum of the support.
    pub fn support_max(&self) -> f64 {
        match *self {
            WaitLaw::Deterministic { value } => value,
            WaitLaw::Mixture { ref components, .. } => components
                .iter()
                .map(WaitLaw::support_max)
                .fold(0.0, f64::max),
            _ => f64::INFINITY,
        }
    }

    /// A `log t` window holding all but ~1e-20 of the mass of a continuous
    /// law. Integration routines widen it further when needed.
    pub(crate) fn scan_range(&self) -> (f64, f64) {
        let tiny = 1e-20f64.ln();
        match *self {
            WaitLaw::Exponential { rate } => (tiny - rate.ln(), (50.0 / rate).ln()),
            WaitLaw::Gamma { shape, scale } => (
                scale.ln() + (tiny + gamma::ln_gamma(shape + 1.0)) / shape,
                (scale * (shape + 60.0 + 12.0 * shape.sqrt())).ln(),
            ),
            WaitLaw::Pareto { index, scale } => (scale.ln(), scale.ln() + LOG_CUTOFF / index),
            WaitLaw::LogNormal { location, scale } => {
                (location - 10.0 * scale, location + 10.0 * scale)
            }
            WaitLaw::Weibull { shape, scale } => {
                (scale.ln() + tiny / shape, scale.ln() + LOG_CUTOFF.ln() / shape)
            }
            WaitLaw::Deterministic { value } => (value.ln(), value.ln()),
            WaitLaw::Mixture { ref components, .. } => components
                .iter()
                .map(WaitLaw::scan_range)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| {
                    (a.min(c), b.max(d))
                }),
        }
    }

    /// `log E[exp(g(tau))]` by adaptive quadrature in `log tau`, where
    /// `log_g` returns `g`. `breaks` are points in `tau` where `g` is not
    /// smooth. Returns `+inf` when the integral diverges.
    pub fn log_expect<G: Fn(f64) -> f64>(&self, log_g: &G, breaks: &[f64]) -> f64 {
        match self {
            WaitLaw::Deterministic { value } => log_g(*value),
            WaitLaw::Mixture { weights, components } => log_sum_exp(
                weights
                    .iter()
                    .zip(components)
                    .map(|(w, c)| w.ln() + c.log_expect(log_g, breaks)),
            ),
            _ => self.log_expect_continuous(log_g, breaks),
        }
    }

    fn log_expect_continuous<G: Fn(f64) -> f64>(&self, log_g: &G, breaks: &[f64]) -> f64 {
        let exponent = |u: f64| -> f64 {
            let t = u.exp();
            let v = log_g(t) + self.ln_pdf(t) + u;
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        };
        let (mut lo, mut hi) = self.scan_range();
        let hard_lo = if self.support_min() > 0.0 { self.support_min().ln() } else { f64::NEG_INFINITY };
        let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
        let mut us: Vec<f64> = (0..SCAN_POINTS).map(|i| lo + step * i as f64).collect();
        let mut es: Vec<f64> = us.iter().map(|&u| exponent(u)).collect();
        let peak = |es: &[f64]| es.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Widen on the right while the integrand is still significant.
        loop {
            let m = peak(&es);
            if m == f64::INFINITY {
                return f64::INFINITY;
            }
            let end = *es.last().unwrap();
            if end < m && end <= m - LOG_CUTOFF {
                break;
            }
            if hi > 700.0 {
                return f64::INFINITY;
            }
            let new_hi = hi + 2.0;
            let mut u = hi + step;
            while u <= new_hi {
                us.push(u);
                es.push(exponent(u));
                u += step;
            }
            hi = *us.last().unwrap();
        }
        loop {
            let m = peak(&es);
            if (es[0] < m && es[0] <= m - LOG_CUTOFF) || lo <= hard_lo || lo < -700.0 {
                break;
            }
            let new_lo = (lo - 2.0).max(hard_lo);
            let mut pre = Vec::new();
            let mut u = new_lo;
            while u < lo - 0.5 * step {
                pre.push(u);
                u += step;
            }
            if pre.is_empty() {
                break;
            }
            let pe: Vec<f64> = pre.iter().map(|&u| exponent(u)).collect();
            us.splice(0..0, pre);
            es.splice(0..0, pe);
            lo = us[0];
        }
        let mut m = peak(&es);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        // The peak may be narrower than the scan step: refine it, then place
        // the ends where the exponent has dropped by LOG_CUTOFF.
        let top = es.iter().position(|&e| e == m).unwrap();
        let (l, r) = (us[top.saturating_sub(1)], us[(top + 1).min(us.len() - 1)]);
        let u_star = golden_max(&exponent, l, r);
        m = m.max(exponent(u_star));
        if 1e-12 * m.abs() > LOG_CUTOFF {
            // The width term is below the resolution of m itself.
            return m;
        }
        let cut = m - LOG_CUTOFF;
        let first = es.iter().position(|&e| e >= cut).unwrap_or(top);
        let last = es.iter().rposition(|&e| e >= cut).unwrap_or(top);
        let a = if first == 0 {
            us[0]
        } else {
            crossing(&exponent, cut, us[first - 1], if first == top { u_star } else { us[first] })
        };
        let b = if last + 1 >= us.len() {
            us[us.len() - 1]
        } else {
            crossing(&exponent, cut, us[last + 1], if last == top { u_star } else { us[last] })
        };
        let mut ubreaks: Vec<f64> = breaks.iter().filter(|t| **t > 0.0).map(|t| t.ln()).collect();
        if u_star > a && u_star < b {
            ubreaks.push(u_star);
            ubreaks.sort_by(f64::total_cmp);
        }
        let r = quad::integrate(|u| (exponent(u) - m).exp(), a, b, &ubreaks, 1e-15, 1e-13);
        if r.value <= 0.0 {
            return f64::NEG_INFINITY;
        }
        m + r.value.ln()
    }

    /// `Lambda(theta) = log E[e^{theta tau}]`, extended-real.
    pub fn log_mgf(&self, theta: f64) -> f64 {
        self.log_mgf_with_derivatives(theta).value
    }

    /// Value, slope and curvature of the log-MGF at `theta`. All three are
    /// `+inf` outside the finiteness domain.
    pub fn log_mgf_with_derivatives(&self, theta: f64) -> LogMgf {
        let xi = self.abscissa();
        if theta > xi || (theta == xi && !self.finite_at_abscissa()) {
            return LogMgf::INFINITE;
        }
        match *self {
            WaitLaw::Exponential { rate } => {
                let d = rate - theta;
                LogMgf { value: (rate / d).ln(), slope: 1.0 / d, curvature: 1.0 / (d * d) }
            }
            WaitLaw::Gamma { shape, scale } => {
                let d = 1.0 - scale * theta;
                LogMgf {
                    value: -shape * d.ln(),
                    slope: shape * scale / d,
                    curvature: shape * scale * scale / (d * d),
                }
            }
            WaitLaw::Weibull { shape, scale } if shape == 1.0 => {
                WaitLaw::Exponential { rate: 1.0 / scale }.log_mgf_with_derivatives(theta)
            }
            WaitLaw::Deterministic { value } => {
                LogMgf { value: theta * value, slope: value, curvature: 0.0 }
            }
            WaitLaw::Mixture { ref weights, ref components } => {
                let parts: Vec<LogMgf> =
                    components.iter().map(|c| c.log_mgf_with_derivatives(theta)).collect();
                let value = if theta == 0.0 {
                    0.0
                } else {
                    log_sum_exp(weights.iter().zip(&parts).map(|(w, p)| w.ln() + p.value))
                };
                let mut slope = 0.0;
                let mut second = 0.0;
                for (w, p) in weights.iter().zip(&parts) {
                    let pi = (w.ln() + p.value - value).exp();
                    if pi > 0.0 {
                        slope += pi * p.slope;
                        second += pi * (p.curvature + p.slope * p.slope);
                    }
                }
                LogMgf { value, slope, curvature: second - slope * slope }
            }
            _ => {
                if theta == 0.0 {
                    let mean = self.mean();
                    let second = self.log_expect(&|t: f64| 2.0 * t.ln(), &[]).exp();
                    return LogMgf { value: 0.0, slope: mean, curvature: second - mean * mean };
                }
                let l0 = self.log_expect(&|t| theta * t, &[]);
                let l1 = self.log_expect(&|t: f64| theta * t + t.ln(), &[]);
                let l2 = self.log_expect(&|t: f64| theta * t + 2.0 * t.ln(), &[]);
                let slope = (l1 - l0).exp();
                LogMgf { value: l0, slope, curvature: ((l2 - l0).exp() - slope * slope).max(0.0) }
            }
        }
    }

    /// Legendre transform `Lambda*(m) = sup_theta (theta m - Lambda(theta))`.
    ///
    /// The maximizer is located by bracketing the root of `Lambda'(theta) = m`
    /// (expanding geometrically from `-1` below the mean) followed by
    /// safeguarded Newton steps. When `xi = 0` and `m` is at least the mean
    /// the supremum sits at `theta = 0` and the result is exactly zero.
    pub fn legendre(&self, m: f64) -> f64 {
        self.legendre_with_argmax(m).0
    }

    /// Legendre transform and the maximizing `theta` (`NaN` when the
    /// supremum is not attained at a finite point).
    pub fn legendre_with_argmax(&self, m: f64) -> (f64, f64) {
        if !(m > 0.0) || m.is_nan() {
            return (f64::INFINITY, f64::NAN);
        }
        let lo_support = self.support_min();
        let hi_support = self.support_max();
        if let WaitLaw::Deterministic { value } = *self {
            return if (m - value).abs() <= 1e-12 * value { (0.0, 0.0) } else { (f64::INFINITY, f64::NAN) };
        }
        if m < lo_support || m > hi_support {
            return (f64::INFINITY, f64::NAN);
        }
        let mean = self.mean();
        if m == mean {
            return (0.0, 0.0);
        }
        let xi = self.abscissa();
        let slope = |th: f64| self.log_mgf_with_derivatives(th);
        let (mut lo, mut hi);
        if m < mean {
            hi = 0.0;
            lo = -1.0;
            let mut guard = 0;
            while slope(lo).slope > m {
                hi = lo;
                lo *= 2.0;
                guard += 1;
                if guard > 1000 {
                    return (f64::INFINITY, f64::NAN);
                }
            }
        } else {
            if xi == 0.0 {
                return (0.0, 0.0);
            }
            lo = 0.0;
            if xi.is_finite() {
                let mut k = 1;
                loop {
                    let th = xi * (1.0 - 0.5f64.powi(k));
                    let s = slope(th);
                    if s.slope > m || !s.value.is_finite() {
                        hi = th;
                        break;
                    }
                    lo = th;
                    k += 1;
                    if k > 60 {
                        // Slope never reaches m inside the domain: supremum at xi.
                        let v = th * m - s.value;
                        return (v.max(0.0), th);
                    }
                }
            } else {
                hi = 1.0;
                let mut guard = 0;
                while slope(hi).slope < m {
                    lo = hi;
                    hi *= 2.0;
                    guard += 1;
                    if guard > 1000 {
                        return (f64::INFINITY, f64::NAN);
                    }
                }
            }
        }
        // Safeguarded Newton on g(theta) = Lambda'(theta) - m, increasing.
        let mut th = 0.5 * (lo + hi);
        for _ in 0..200 {
            let s = slope(th);
            let g = s.slope - m;
            if g.abs() <= 1e-13 * m.max(1.0) {
                break;
            }
            if g > 0.0 {
                hi = th;
            } else {
                lo = th;
            }
            let newton = if s.curvature > 0.0 && s.curvature.is_finite() { th - g / s.curvature } else { f64::NAN };
            th = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * (1.0 + th.abs()) {
                break;
            }
        }
        let value = th * m - self.log_mgf(th);
        (value.max(0.0), th)
    }

    /// Closed form of the law tilted by `e^{theta tau}`, when the family is
    /// conjugate to exponential tilting.
    pub fn exponential_tilt(&self, theta: f64) -> Option<WaitLaw> {
        if theta >= self.abscissa() {
            return None;
        }
        match *self {
            WaitLaw::Exponential { rate } => Some(WaitLaw::Exponential { rate: rate - theta }),
            WaitLaw::Gamma { shape, scale } => {
                Some(WaitLaw::Gamma { shape, scale: scale / (1.0 - scale * theta) })
            }
            WaitLaw::Deterministic { .. } => Some(self.clone()),
            _ => None,
        }
    }
}

/// Maximizer of `f` on `[a, b]` by golden section.
fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        c
    } else {
        d
    }
}

/// A point between `below` (where `f < level`) and `above` (where
/// `f >= level`) at which `f` crosses `level`, by bisection.
fn crossing(f: &impl Fn(f64) -> f64, level: f64, mut below: f64, mut above: f64) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (below + above);
        if f(mid) >= level {
            above = mid;
        } else {
            below = mid;
        }
    }
    below
}
