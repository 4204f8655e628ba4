//! Delay densities `h(Δ)` on `Δ > 0`.
//!
//! Every family evaluates to exactly zero for `Δ <= 0`, so an event can only
//! trigger strictly later events. Besides density/CDF/sampling each family
//! supports a weighted maximum-likelihood update from `(Δ, weight)` pairs,
//! which is what the M-step feeds it.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaSampler};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpComponent {
    pub weight: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Delay {
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
    /// Uniform on `(0, width]`; the width is a fixed hyperparameter.
    Uniform { width: f64 },
    /// Piecewise-constant density over fixed bins `(e[b-1], e[b]]` with `e[0] = 0`.
    PiecewiseUniform { edges: Vec<f64>, probs: Vec<f64> },
    ExpMixture { components: Vec<ExpComponent> },
}

const NEWTON_SCORE_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 100;

impl Delay {
    pub fn exponential(rate: f64) -> Self {
        Delay::Exponential { rate }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = match self {
            Delay::Exponential { rate } => pos(*rate),
            Delay::Gamma { shape, rate } => pos(*shape) && pos(*rate),
            Delay::Uniform { width } => pos(*width),
            Delay::PiecewiseUniform { edges, probs } => {
                edges.len() >= 2
                    && edges[0] == 0.0
                    && edges.windows(2).all(|w| w[1] > w[0] && w[1].is_finite())
                    && probs.len() + 1 == edges.len()
                    && probs.iter().all(|p| *p >= 0.0)
                    && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
            Delay::ExpMixture { components } => {
                !components.is_empty()
                    && components.iter().all(|c| c.weight >= 0.0 && pos(c.rate))
                    && (components.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid delay {self:?}")))
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Delay::Exponential { .. } => "exponential",
            Delay::Gamma { .. } => "gamma",
            Delay::Uniform { .. } => "uniform",
            Delay::PiecewiseUniform { .. } => "piecewise_uniform",
            Delay::ExpMixture { .. } => "exp_mixture",
        }
    }

    /// Right end of the support, or infinity.
    pub fn support_end(&self) -> f64 {
        match self {
            Delay::Uniform { width } => *width,
            Delay::PiecewiseUniform { edges, .. } => *edges.last().unwrap(),
            _ => f64::INFINITY,
        }
    }

    pub fn density(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return 0.0;
        }
        match self {
            Delay::Exponential { rate } => rate * (-rate * delta).exp(),
            Delay::Gamma { .. } => self.log_density(delta).exp(),
            Delay::Uniform { width } => {
                if delta <= *width {
                    1.0 / width
                } else {
                    0.0
                }
            }
            Delay::PiecewiseUniform { edges, probs } => match bin_of(edges, delta) {
                Some(b) => probs[b] / (edges[b + 1] - edges[b]),
                None => 0.0,
            },
            Delay::ExpMixture { components } => components
                .iter()
                .map(|c| c.weight * c.rate * (-c.rate * delta).exp())
                .sum(),
        }
    }

    pub fn log_density(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match self {
            Delay::Exponential { rate } => rate.ln() - rate * delta,
            Delay::Gamma { shape, rate } => {
                shape * rate.ln() + (shape - 1.0) * delta.ln() - rate * delta - ln_gamma(*shape)
            }
            _ => self.density(delta).ln(),
        }
    }

    pub fn cdf(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return 0.0;
        }
        match self {
            Delay::Exponential { rate } => -(-rate * delta).exp_m1(),
            Delay::Gamma { shape, rate } => {
                if delta.is_infinite() {
                    1.0
                } else {
                    gamma_lr(*shape, rate * delta)
                }
            }
            Delay::Uniform { width } => (delta / width).min(1.0),
            Delay::PiecewiseUniform { edges, probs } => {
                let mut acc = 0.0;
                for b in 0..probs.len() {
                    let (lo, hi) = (edges[b], edges[b + 1]);
                    if delta >= hi {
                        acc += probs[b];
                    } else {
                        acc += probs[b] * (delta - lo) / (hi - lo);
                        break;
                    }
                }
                acc.min(1.0)
            }
            Delay::ExpMixture { components } => components
                .iter()
                .map(|c| -c.weight * (-c.rate * delta).exp_m1())
                .sum::<f64>()
                .min(1.0),
        }
    }

    /// `1 - cdf`, computed without cancellation where the family allows.
    pub fn survival(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return 1.0;
        }
        match self {
            Delay::Exponential { rate } => (-rate * delta).exp(),
            Delay::Gamma { shape, rate } => {
                if delta.is_infinite() {
                    0.0
                } else {
                    gamma_ur(*shape, rate * delta)
                }
            }
            Delay::ExpMixture { components } => components
                .iter()
                .map(|c| c.weight * (-c.rate * delta).exp())
                .sum(),
            _ => (1.0 - self.cdf(delta)).max(0.0),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Delay::Exponential { rate } => 1.0 / rate,
            Delay::Gamma { shape, rate } => shape / rate,
            Delay::Uniform { width } => width / 2.0,
            Delay::PiecewiseUniform { edges, probs } => probs
                .iter()
                .enumerate()
                .map(|(b, p)| p * 0.5 * (edges[b] + edges[b + 1]))
                .sum(),
            Delay::ExpMixture { components } => components.iter().map(|c| c.weight / c.rate).sum(),
        }
    }

    /// Truncation window: the smallest delay whose tail mass falls below
    /// `eps`. Finite-support families return their support end; `eps = 0`
    /// disables truncation.
    pub fn tail_window(&self, eps: f64) -> f64 {
        let end = self.support_end();
        if end.is_finite() {
            return end;
        }
        if eps <= 0.0 {
            return f64::INFINITY;
        }
        if eps >= 1.0 {
            return 0.0;
        }
        if let Delay::Exponential { rate } = self {
            return (-eps.ln() / rate).next_up();
        }
        let mut hi = self.mean().max(f64::MIN_POSITIVE);
        while self.survival(hi) >= eps {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.survival(mid) < eps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Draws a strictly positive delay.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let d = self.sample_raw(rng);
            if d > 0.0 {
                return d;
            }
        }
    }

    fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // 1 - u lies in (0, 1]
        match self {
            Delay::Exponential { rate } => -unit(rng).ln() / rate,
            Delay::Gamma { shape, rate } => GammaSampler::new(*shape, 1.0 / rate)
                .expect("validated gamma parameters")
                .sample(rng),
            Delay::Uniform { width } => width * unit(rng),
            Delay::PiecewiseUniform { edges, probs } => {
                let b = pick(probs, rng.random::<f64>());
                let (lo, hi) = (edges[b], edges[b + 1]);
                hi - (hi - lo) * rng.random::<f64>()
            }
            Delay::ExpMixture { components } => {
                let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
                let c = components[pick(&weights, rng.random::<f64>())];
                -unit(rng).ln() / c.rate
            }
        }
    }

    /// Weighted maximum likelihood within the family of `self`.
    ///
    /// `self` supplies everything that is not fitted: the uniform width, the
    /// piecewise bin edges and, for mixtures, the current component weights
    /// and rates used for one inner EM pass.
    pub fn weighted_mle(&self, samples: &[(f64, f64)]) -> Result<Delay> {
        let mut total_w = 0.0;
        let mut total_wd = 0.0;
        for &(d, w) in samples {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::param(format!("negative weight {w}")));
            }
            if w > 0.0 && !(d > 0.0) {
                return Err(Error::param(format!("non-positive delay {d} with weight {w}")));
            }
            total_w += w;
            total_wd += w * d;
        }
        if total_w <= 0.0 {
            return Err(Error::ZeroWeight("delay samples"));
        }
        match self {
            Delay::Exponential { .. } => Ok(Delay::Exponential { rate: total_w / total_wd }),
            Delay::Gamma { .. } => fit_gamma_shape(samples, total_w, total_wd),
            Delay::Uniform { .. } => Ok(self.clone()),
            Delay::PiecewiseUniform { edges, probs } => {
                let mut mass = vec![0.0; probs.len()];
                for &(d, w) in samples {
                    if let Some(b) = bin_of(edges, d) {
                        mass[b] += w;
                    }
                }
                let z: f64 = mass.iter().sum();
                if z <= 0.0 {
                    return Err(Error::ZeroWeight("piecewise delay bins"));
                }
                Ok(Delay::PiecewiseUniform {
                    edges: edges.clone(),
                    probs: mass.into_iter().map(|m| m / z).collect(),
                })
            }
            Delay::ExpMixture { components } => {
                let k = components.len();
                let mut resp_w = vec![0.0; k];
                let mut resp_wd = vec![0.0; k];
                let mut parts = vec![0.0; k];
                for &(d, w) in samples {
                    if w == 0.0 {
                        continue;
                    }
                    let mut norm = 0.0;
                    for (c, p) in components.iter().zip(parts.iter_mut()) {
                        *p = c.weight * c.rate * (-c.rate * d).exp();
                        norm += *p;
                    }
                    if norm <= 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        let r = w * parts[c] / norm;
                        resp_w[c] += r;
                        resp_wd[c] += r * d;
                    }
                }
                let z: f64 = resp_w.iter().sum();
                if z <= 0.0 {
                    return Err(Error::ZeroWeight("mixture delay"));
                }
                let components = components
                    .iter()
                    .enumerate()
                    .map(|(c, old)| ExpComponent {
                        weight: resp_w[c] / z,
                        // a starved component keeps its rate
                        rate: if resp_wd[c] > 0.0 { resp_w[c] / resp_wd[c] } else { old.rate },
                    })
                    .collect();
                Ok(Delay::ExpMixture { components })
            }
        }
    }

    /// Parameter path from `self` (t = 0) to `other` (t = 1) within one family.
    /// Rates and shapes move geometrically, probabilities linearly.
    pub fn interpolate(&self, other: &Delay, t: f64) -> Delay {
        let geo = |a: f64, b: f64| a.powf(1.0 - t) * b.powf(t);
        let lin = |a: f64, b: f64| (1.0 - t) * a + t * b;
        match (self, other) {
            (Delay::Exponential { rate: a }, Delay::Exponential { rate: b }) => {
                Delay::Exponential { rate: geo(*a, *b) }
            }
            (Delay::Gamma { shape: sa, rate: ra }, Delay::Gamma { shape: sb, rate: rb }) => {
                Delay::Gamma { shape: geo(*sa, *sb), rate: geo(*ra, *rb) }
            }
            (
                Delay::PiecewiseUniform { edges, probs: pa },
                Delay::PiecewiseUniform { probs: pb, .. },
            ) => Delay::PiecewiseUniform {
                edges: edges.clone(),
                probs: pa.iter().zip(pb).map(|(a, b)| lin(*a, *b)).collect(),
            },
            (Delay::ExpMixture { components: ca }, Delay::ExpMixture { components: cb }) => {
                Delay::ExpMixture {
                    components: ca
                        .iter()
                        .zip(cb)
                        .map(|(a, b)| ExpComponent {
                            weight: lin(a.weight, b.weight),
                            rate: geo(a.rate, b.rate),
                        })
                        .collect(),
                }
            }
            _ => if t < 1.0 { self.clone() } else { other.clone() },
        }
    }

    /// M-step update that accounts for offspring windows cut off by the
    /// observation horizon.
    ///
    /// Maximises `Σ w log h(Δ) − Σ a (H(hi) − H(lo))` over the family, where
    /// each exposure `(a, lo, hi)` is a parent's fertility and the part of its
    /// offspring window that lies inside the observation window. The returned
    /// delay never scores below `self` on that objective.
    pub fn fit_with_exposure(&self, samples: &[(f64, f64)], exposures: &[(f64, f64, f64)]) -> Result<Delay> {
        if samples.iter().map(|s| s.1).sum::<f64>() <= 0.0 {
            return Ok(self.clone());
        }
        let objective = |h: &Delay| -> f64 {
            let fit: f64 = samples
                .iter()
                .filter(|s| s.1 > 0.0)
                .map(|&(d, w)| w * h.log_density(d))
                .sum();
            let comp: f64 = exposures
                .iter()
                .map(|&(a, lo, hi)| a * (h.cdf(hi) - h.cdf(lo)))
                .sum();
            fit - comp
        };
        let mut candidate = self.weighted_mle(samples)?;
        if let Delay::Exponential { rate } = candidate {
            candidate = Delay::Exponential { rate: exponential_edge_root(samples, exposures, rate) };
        }
        let base = objective(self);
        let mut t = 1.0;
        for _ in 0..40 {
            let trial = self.interpolate(&candidate, t);
            let value = objective(&trial);
            if value >= base && trial.validate().is_ok() {
                return Ok(trial);
            }
            t *= 0.5;
        }
        Ok(self.clone())
    }
}

/// Stationary point of the edge-corrected exponential objective, searched
/// below the uncorrected estimate (the correction only pulls the rate down
/// when parents sit at the horizon).
fn exponential_edge_root(samples: &[(f64, f64)], exposures: &[(f64, f64, f64)], naive: f64) -> f64 {
    let (mut zw, mut sd) = (0.0, 0.0);
    for &(d, w) in samples {
        zw += w;
        sd += w * d;
    }
    let score = |rate: f64| -> f64 {
        let mut g = zw / rate - sd;
        for &(a, lo, hi) in exposures {
            // d/dλ of −a (e^{−λ lo} − e^{−λ hi})
            let lo = lo.max(0.0);
            let hi_term = if hi.is_finite() { hi * (-rate * hi).exp() } else { 0.0 };
            g += a * (lo * (-rate * lo).exp() - hi_term);
        }
        g
    };
    let mut hi = naive;
    let mut steps = 0;
    while score(hi) > 0.0 && steps < 200 {
        hi *= 2.0;
        steps += 1;
    }
    let mut lo = hi;
    steps = 0;
    while score(lo) < 0.0 && steps < 2000 {
        lo *= 0.5;
        steps += 1;
    }
    if score(lo) < 0.0 || score(hi) > 0.0 {
        return naive;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn fit_gamma_shape(samples: &[(f64, f64)], total_w: f64, total_wd: f64) -> Result<Delay> {
    let mean = total_wd / total_w;
    let mut mean_log = 0.0;
    let mut var = 0.0;
    for &(d, w) in samples {
        if w > 0.0 {
            mean_log += w * d.ln();
            var += w * (d - mean) * (d - mean);
        }
    }
    mean_log /= total_w;
    var /= total_w;
    let s = mean.ln() - mean_log;
    if !(s > 1e-14) || !(var > 0.0) {
        return Err(Error::Degenerate("gamma delay fit needs spread-out delays".into()));
    }
    // profile score in the shape: log k − ψ(k) − s, decreasing in k
    let score = |k: f64| k.ln() - digamma(k) - s;
    let mut k = (mean * mean / var).max(1e-8);
    for _ in 0..NEWTON_MAX_ITERS {
        let g = score(k);
        if g.abs() < NEWTON_SCORE_TOL {
            break;
        }
        let slope = 1.0 / k - trigamma(k);
        let mut next = k - g / slope;
        if !(next > 0.0) || !next.is_finite() {
            next = if g > 0.0 { k * 2.0 } else { k * 0.5 };
        }
        k = next;
    }
    Ok(Delay::Gamma { shape: k, rate: k * total_w / total_wd })
}

/// Trigamma ψ'(x) for x > 0, by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * 5.0 / 66.0))))
}

fn bin_of(edges: &[f64], delta: f64) -> Option<usize> {
    if delta <= 0.0 || delta > *edges.last()? {
        return None;
    }
    // first edge >= delta closes the bin
    let i = edges.partition_point(|&e| e < delta);
    Some(i - 1)
}

/// Inverse-CDF pick over unnormalised nonnegative weights.
fn unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

pub(crate) fn pick(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}
