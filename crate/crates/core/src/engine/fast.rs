//! Recursive E-step for categorical marks with exponential delays.
//!
//! With `h(Δ) = λe^{−λΔ}` the summed influence of all earlier events decays
//! by a common factor between consecutive event times, so per (component,
//! source label) it suffices to carry
//!
//! * `A = Σ α(x_j) λ e^{−λ(t − t_j)}` over parents with that label, and
//! * `D = Σ (t − t_j) α(x_j) λ e^{−λ(t − t_j)}`, whose ratio `D/A` is the
//!   responsibility-weighted mean delay,
//!
//! plus `B_j = Σ_k g(j|k) A_k`, the triggered intensity toward each target
//! label. New events increment `A` for their own label and `B` only at the
//! targets their transition row reaches. The statistics produced match those
//! of the direct E-step; no truncation is applied.

use super::{Cause, EventStream, Evaluator, ModelSpec, Responsibilities};
use crate::delay::Delay;
use crate::error::{Error, Result};
use crate::event::{Mark, MarkSchema};

/// Largest label count accepted by the recursive path.
pub const MAX_FAST_LABELS: usize = 256;

/// Expected sufficient statistics of an E-step over categorical marks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpStats {
    /// Baseline responsibility per baseline bucket.
    pub baseline_by_bucket: Vec<f64>,
    /// Baseline responsibility per event label.
    pub baseline_by_label: Vec<f64>,
    /// `Σ z` per component.
    pub credit: Vec<f64>,
    /// `Σ z Δ` per component.
    pub delay_sum: Vec<f64>,
    /// `[c][source][target]`: expected transition counts per component.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl ExpStats {
    fn zeros(buckets: usize, labels: usize, components: usize) -> Self {
        Self {
            baseline_by_bucket: vec![0.0; buckets],
            baseline_by_label: vec![0.0; labels],
            credit: vec![0.0; components],
            delay_sum: vec![0.0; components],
            transitions: vec![vec![vec![0.0; labels]; labels]; components],
        }
    }

    /// The same statistics read off explicit responsibilities.
    pub fn from_responsibilities(model: &ModelSpec, stream: &EventStream, z: &Responsibilities) -> Self {
        let labels = stream.schema().width();
        let mut s = Self::zeros(model.baseline.rate.buckets(), labels, model.components.len());
        let events = stream.events();
        for (i, e) in events.iter().enumerate() {
            let y = e.mark.label().unwrap_or(0);
            for (cause, w) in z.row(i) {
                match cause {
                    Cause::Baseline => {
                        s.baseline_by_bucket[model.baseline.rate.bucket(e.t)] += w;
                        s.baseline_by_label[y] += w;
                    }
                    Cause::Kernel { parent, component } => {
                        let p = &events[parent];
                        s.credit[component] += w;
                        s.delay_sum[component] += w * (e.t - p.t);
                        s.transitions[component][p.mark.label().unwrap_or(0)][y] += w;
                    }
                }
            }
        }
        s
    }

    /// Credit per source label of component `c`.
    pub fn parent_credit(&self, c: usize) -> Vec<f64> {
        self.transitions[c].iter().map(|row| row.iter().sum()).collect()
    }

    /// Largest relative difference over all entries, with absolute
    /// differences below `1e-300` ignored.
    pub fn max_relative_difference(&self, other: &ExpStats) -> f64 {
        let flat = |s: &ExpStats| -> Vec<f64> {
            let mut v = Vec::new();
            v.extend(&s.baseline_by_bucket);
            v.extend(&s.baseline_by_label);
            v.extend(&s.credit);
            v.extend(&s.delay_sum);
            v.extend(s.transitions.iter().flatten().flatten());
            v
        };
        let (a, b) = (flat(self), flat(other));
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter()
            .zip(&b)
            .map(|(x, y)| {
                let d = (x - y).abs();
                if d < 1e-300 {
                    0.0
                } else {
                    d / x.abs().max(y.abs())
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastEStep {
    pub stats: ExpStats,
    /// Total intensity at each scored event (0 for unscored events).
    pub intensity: Vec<f64>,
    /// Triggered intensity toward every label just before each event.
    pub triggered: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

pub fn fast_estep_exponential(model: &ModelSpec, stream: &EventStream) -> Result<FastEStep> {
    let labels = match stream.schema() {
        MarkSchema::Labels { count } => *count,
        other => return Err(Error::schema(format!("recursive E-step needs plain labels, got {other:?}"))),
    };
    if labels > MAX_FAST_LABELS {
        return Err(Error::param(format!("{labels} labels exceed the recursive bound {MAX_FAST_LABELS}")));
    }
    let mut rates = Vec::with_capacity(model.components.len());
    for c in &model.components {
        match c.delay {
            Delay::Exponential { rate } => rates.push(rate),
            _ => return Err(Error::param(format!("component `{}` needs an exponential delay", c.name))),
        }
        if !super::is_any(&c.scope) {
            return Err(Error::param(format!("component `{}` restricts its parents", c.name)));
        }
    }
    let nc = model.components.len();
    // g[c][k][j] and the nonzero targets of each source row
    let g: Vec<Vec<Vec<f64>>> = model
        .components
        .iter()
        .map(|c| {
            (0..labels)
                .map(|k| {
                    (0..labels)
                        .map(|j| c.transition.prob_unchecked(&Mark::Label(k as u32), &Mark::Label(j as u32)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let reach: Vec<Vec<Vec<usize>>> = g
        .iter()
        .map(|gc| gc.iter().map(|row| (0..labels).filter(|&j| row[j] > 0.0).collect()).collect())
        .collect();

    let events = stream.events();
    let mut stats = ExpStats::zeros(model.baseline.rate.buckets(), labels, nc);
    let mut intensity = vec![0.0; events.len()];
    let mut triggered = vec![Vec::new(); events.len()];
    let mut a = vec![vec![0.0; labels]; nc];
    let mut d = vec![vec![0.0; labels]; nc];
    let mut b = vec![vec![0.0; labels]; nc];
    let mut last = events.first().map_or(0.0, |e| e.t);
    let mut log_sum = 0.0;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].t;
        let gap = t - last;
        if gap > 0.0 {
            for c in 0..nc {
                let f = (-rates[c] * gap).exp();
                for k in 0..labels {
                    d[c][k] = f * (d[c][k] + gap * a[c][k]);
                    a[c][k] *= f;
                    b[c][k] *= f;
                }
            }
            last = t;
        }
        // events sharing a timestamp cannot trigger each other
        let end = i + events[i..].partition_point(|e| e.t == t);
        for idx in i..end {
            triggered[idx] = (0..labels).map(|j| (0..nc).map(|c| b[c][j]).sum()).collect();
            if !stream.is_scored(idx) {
                continue;
            }
            let y = events[idx].mark.label().expect("label schema");
            let base = model.baseline.rate.rate_at(t) * model.baseline.marks.prob(&events[idx].mark);
            let mut total = base;
            for c in 0..nc {
                for k in 0..labels {
                    total += g[c][k][y] * a[c][k];
                }
            }
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::ZeroIntensity { event: idx, t });
            }
            intensity[idx] = total;
            log_sum += total.ln();
            stats.baseline_by_bucket[model.baseline.rate.bucket(t)] += base / total;
            stats.baseline_by_label[y] += base / total;
            for c in 0..nc {
                for k in 0..labels {
                    let v = g[c][k][y] * a[c][k];
                    if v > 0.0 {
                        let z = v / total;
                        stats.credit[c] += z;
                        stats.transitions[c][k][y] += z;
                        stats.delay_sum[c] += g[c][k][y] * d[c][k] / total;
                    }
                }
            }
        }
        for idx in i..end {
            let y = events[idx].mark.label().expect("label schema");
            for (c, comp) in model.components.iter().enumerate() {
                let inc = comp.fertility.eval_unchecked(&events[idx].mark) * rates[c];
                if inc == 0.0 {
                    continue;
                }
                a[c][y] += inc;
                for &j in &reach[c][y] {
                    b[c][j] += inc * g[c][y][j];
                }
            }
        }
        i = end;
    }
    let windows = model.windows();
    let compensator = Evaluator::new(model, stream, &windows).compensator();
    Ok(FastEStep { stats, intensity, triggered, log_likelihood: log_sum - compensator })
}
