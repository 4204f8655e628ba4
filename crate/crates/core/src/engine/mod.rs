//! Model composition, likelihood, and EM fitting.
//!
//! A model is a baseline process plus a list of additive triggering
//! components `α_c(x) g_c(x'|x) h_c(Δ)`. The E-step assigns every scored
//! event a distribution over its candidate causes (the baseline or an
//! earlier event through one component); the M-step refits each part from
//! the weighted samples.

mod fast;
mod fit;
pub mod presets;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fast::{fast_estep_exponential, ExpStats, FastEStep, MAX_FAST_LABELS};
pub use fit::{fit, m_step, normalize, FitOptions, FitReport};

use crate::delay::Delay;
use crate::error::{Error, Result};
use crate::event::{Dataset, Event, Mark, MarkSchema, NodeId};
use crate::fertility::Fertility;
use crate::transition::{MarkPrior, Transition};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Time profile of the baseline rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineRate {
    Homogeneous { rate: f64 },
    /// Piecewise-constant rate repeating with `period`; bucket `k` covers
    /// `[k P/K, (k+1) P/K)` of each period.
    PeriodicStep { period: f64, rates: Vec<f64> },
}

impl BaselineRate {
    pub fn buckets(&self) -> usize {
        self.rates().len()
    }

    pub fn rates(&self) -> &[f64] {
        match self {
            BaselineRate::Homogeneous { rate } => std::slice::from_ref(rate),
            BaselineRate::PeriodicStep { rates, .. } => rates,
        }
    }

    pub fn with_rates(&self, rates: Vec<f64>) -> BaselineRate {
        match self {
            BaselineRate::Homogeneous { .. } => BaselineRate::Homogeneous { rate: rates[0] },
            BaselineRate::PeriodicStep { period, .. } => BaselineRate::PeriodicStep { period: *period, rates },
        }
    }

    pub fn bucket(&self, t: f64) -> usize {
        match self {
            BaselineRate::Homogeneous { .. } => 0,
            BaselineRate::PeriodicStep { period, rates } => {
                let k = rates.len();
                let r = t.rem_euclid(*period);
                ((r / (period / k as f64)).floor() as usize).min(k - 1)
            }
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.rates()[self.bucket(t)]
    }

    /// Time spent in each bucket over `[a, b]`.
    pub fn exposures(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            BaselineRate::Homogeneous { .. } => vec![(b - a).max(0.0)],
            BaselineRate::PeriodicStep { period, rates } => {
                let width = period / rates.len() as f64;
                let cum = |t: f64| -> Vec<f64> {
                    let n = (t / period).floor();
                    let r = t - n * period;
                    (0..rates.len())
                        .map(|k| n * width + (r - k as f64 * width).clamp(0.0, width))
                        .collect()
                };
                let (lo, hi) = (cum(a), cum(b.max(a)));
                hi.iter().zip(&lo).map(|(h, l)| (h - l).max(0.0)).collect()
            }
        }
    }

    /// `∫_a^b μ(t) dt`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.exposures(a, b).iter().zip(self.rates()).map(|(e, r)| e * r).sum()
    }

    fn validate(&self) -> Result<()> {
        if let BaselineRate::PeriodicStep { period, rates } = self {
            if !(*period > 0.0 && period.is_finite()) || rates.is_empty() {
                return Err(Error::param("periodic baseline needs a positive period and at least one bucket"));
            }
        }
        if self.rates().iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::param("baseline rates must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub rate: BaselineRate,
    /// Mark distribution of baseline events.
    pub marks: MarkPrior,
    /// Refit `marks` from baseline responsibilities in the M-step.
    #[serde(default = "yes")]
    pub refit_marks: bool,
}

/// Which earlier events may act as parents through a component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParentScope {
    #[default]
    Any,
    /// Only events on this node.
    Node { node: NodeId },
    /// Events on any node except this one.
    NotNode { node: NodeId },
}

impl ParentScope {
    pub fn admits(&self, mark: &Mark) -> bool {
        match self {
            ParentScope::Any => true,
            ParentScope::Node { node } => mark.node() == Some(*node),
            ParentScope::NotNode { node } => mark.node() != Some(*node),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelComponent {
    pub name: String,
    pub fertility: Fertility,
    pub transition: Transition,
    pub delay: Delay,
    #[serde(default, skip_serializing_if = "is_any")]
    pub scope: ParentScope,
    /// Components naming the same group share one fitted transition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_group: Option<String>,
}

fn is_any(s: &ParentScope) -> bool {
    *s == ParentScope::Any
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub baseline: BaselineSpec,
    #[serde(default)]
    pub components: Vec<KernelComponent>,
    /// Rescale rates after each M-step so the compensator equals the event count.
    #[serde(default)]
    pub normalize: bool,
    /// Delay tail mass beyond which parents are ignored (0 disables truncation).
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl ModelSpec {
    pub fn baseline_only(rate: BaselineRate, marks: MarkPrior) -> Self {
        ModelSpec {
            baseline: BaselineSpec { rate, marks, refit_marks: true },
            components: Vec::new(),
            normalize: false,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self, schema: &MarkSchema) -> Result<()> {
        self.baseline.rate.validate()?;
        self.baseline.marks.check(schema)?;
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::param("truncation tail mass must lie in [0, 1)"));
        }
        for c in &self.components {
            let named = |e: Error| match e {
                Error::InvalidParameter(m) => Error::InvalidParameter(format!("component `{}`: {m}", c.name)),
                other => other,
            };
            c.fertility.validate(schema).map_err(named)?;
            c.transition.validate(schema).map_err(named)?;
            c.delay.validate().map_err(named)?;
        }
        for group in self.transition_groups() {
            let first = &self.components[group[0]].transition;
            if group.iter().any(|&c| self.components[c].transition != *first) {
                return Err(Error::param("components in one transition group must start from the same transition"));
            }
        }
        Ok(())
    }

    /// Per-component truncation windows.
    pub fn windows(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.delay.tail_window(self.epsilon)).collect()
    }

    /// Component indices grouped by shared transition, in order of first appearance.
    pub fn transition_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<(Option<&str>, Vec<usize>)> = Vec::new();
        for (c, comp) in self.components.iter().enumerate() {
            match comp.transition_group.as_deref() {
                Some(name) => match groups.iter_mut().find(|g| g.0 == Some(name)) {
                    Some(g) => g.1.push(c),
                    None => groups.push((Some(name), vec![c])),
                },
                None => groups.push((None, vec![c])),
            }
        }
        groups.into_iter().map(|g| g.1).collect()
    }

    /// Log-prior of shrunk transitions, counted once per shared group.
    pub fn log_prior(&self) -> f64 {
        self.transition_groups()
            .iter()
            .map(|g| self.components[g[0]].transition.log_prior())
            .sum()
    }

    /// True when every M-step update maximizes its part of the objective, so
    /// EM must not decrease it.
    pub fn monotone(&self) -> bool {
        self.components.iter().all(|c| c.fertility.is_exact_update())
    }

    /// Rates of the baseline and of every component multiplied by `s`.
    pub fn scaled(&self, s: f64) -> ModelSpec {
        let mut out = self.clone();
        out.baseline.rate = self.baseline.rate.with_rates(self.baseline.rate.rates().iter().map(|r| r * s).collect());
        for c in &mut out.components {
            c.fertility = c.fertility.scaled(s);
        }
        out
    }

    /// Mean fertility of each component over the stream's events, as shares
    /// of the total.
    pub fn fertility_shares(&self, stream: &EventStream) -> Vec<f64> {
        let means: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let n = stream.len().max(1) as f64;
                stream
                    .events()
                    .iter()
                    .filter(|e| c.scope.admits(&e.mark))
                    .map(|e| c.fertility.eval_unchecked(&e.mark))
                    .sum::<f64>()
                    / n
            })
            .collect();
        let total: f64 = means.iter().sum();
        means.into_iter().map(|m| if total > 0.0 { m / total } else { 0.0 }).collect()
    }

    pub fn delay_means(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.delay.mean()).collect()
    }
}

/// Events prepared for fitting or scoring.
///
/// Every event can act as a parent; only `scored` events enter the
/// likelihood as children. Scored events lie in `[start, horizon]`, which is
/// also the window the compensator integrates over.
#[derive(Debug, Clone)]
pub struct EventStream {
    events: Vec<Event>,
    scored: Vec<bool>,
    n_scored: usize,
    start: f64,
    horizon: f64,
    schema: MarkSchema,
}

impl EventStream {
    pub fn new(events: Vec<Event>, scored: Vec<bool>, start: f64, horizon: f64, schema: MarkSchema) -> Result<Self> {
        if events.len() != scored.len() {
            return Err(Error::param("one scored flag per event"));
        }
        if !(start <= horizon) {
            return Err(Error::param("stream start after horizon"));
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::param("stream events must be sorted by time"));
        }
        for (i, (e, s)) in events.iter().zip(&scored).enumerate() {
            schema.check(&e.mark)?;
            if e.t > horizon || (*s && e.t < start) {
                return Err(Error::Timestamp { line: i + 1, t: e.t, horizon });
            }
        }
        let n_scored = scored.iter().filter(|s| **s).count();
        Ok(Self { events, scored, n_scored, start, horizon, schema })
    }

    /// Scores `target` with `history` available as parents.
    pub fn conditioned(history: &Dataset, target: &Dataset) -> Result<Self> {
        let mut tagged: Vec<(Event, bool)> = history
            .events()
            .iter()
            .map(|e| (e.clone(), false))
            .chain(target.events().iter().map(|e| (e.clone(), true)))
            .collect();
        tagged.sort_by(|a, b| a.0.t.total_cmp(&b.0.t));
        let (events, scored) = tagged.into_iter().unzip();
        Self::new(events, scored, target.start(), target.horizon(), target.schema().clone())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_scored(&self, i: usize) -> bool {
        self.scored[i]
    }

    pub fn scored_count(&self) -> usize {
        self.n_scored
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn schema(&self) -> &MarkSchema {
        &self.schema
    }
}

impl From<&Dataset> for EventStream {
    fn from(d: &Dataset) -> Self {
        EventStream {
            events: d.events().to_vec(),
            scored: vec![true; d.len()],
            n_scored: d.len(),
            start: d.start(),
            horizon: d.horizon(),
            schema: d.schema().clone(),
        }
    }
}

/// A candidate cause of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cause {
    Baseline,
    Kernel { parent: usize, component: usize },
}

/// E-step output in compressed rows: for each event, its causes with
/// positive responsibility (empty for unscored events).
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    offsets: Vec<usize>,
    causes: Vec<Cause>,
    weights: Vec<f64>,
    intensity: Vec<f64>,
    compensator: f64,
}

impl Responsibilities {
    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (Cause, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.causes[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// Total intensity at event `i` (0 for unscored events).
    pub fn intensity(&self, i: usize) -> f64 {
        self.intensity[i]
    }

    pub fn compensator(&self) -> f64 {
        self.compensator
    }

    /// `Σ log λ(t_i, x_i) − Λ` of the model the responsibilities came from.
    pub fn log_likelihood(&self) -> f64 {
        self.intensity.iter().filter(|v| **v > 0.0).map(|v| v.ln()).sum::<f64>() - self.compensator
    }

    /// Most responsible cause per event; ties go to the baseline, then to
    /// the earlier parent.
    pub fn argmax(&self, i: usize) -> Option<Cause> {
        let mut best: Option<(Cause, f64)> = None;
        for (c, w) in self.row(i) {
            match best {
                Some((bc, bw)) if w < bw || (w == bw && bc <= c) => {}
                _ => best = Some((c, w)),
            }
        }
        best.map(|b| b.0)
    }

    /// Builds rows from explicit `(cause, weight)` lists, normalizing each.
    pub fn from_rows(rows: Vec<Vec<(Cause, f64)>>) -> Self {
        let mut out = Responsibilities {
            offsets: vec![0],
            causes: Vec::new(),
            weights: Vec::new(),
            intensity: Vec::new(),
            compensator: 0.0,
        };
        for row in rows {
            let total: f64 = row.iter().map(|r| r.1).sum();
            for (c, w) in row {
                out.causes.push(c);
                out.weights.push(w / total);
            }
            out.offsets.push(out.causes.len());
            out.intensity.push(total);
        }
        out
    }
}

/// Per-(model, stream) evaluation state: cached fertilities and windows.
pub(crate) struct Evaluator<'a> {
    model: &'a ModelSpec,
    stream: &'a EventStream,
    windows: &'a [f64],
    max_window: f64,
    /// `alpha[c][j]`: fertility of event `j` through component `c` (0 out of scope).
    alpha: Vec<Vec<f64>>,
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(model: &'a ModelSpec, stream: &'a EventStream, windows: &'a [f64]) -> Self {
        let alpha = model
            .components
            .iter()
            .map(|c| {
                stream
                    .events
                    .iter()
                    .map(|e| if c.scope.admits(&e.mark) { c.fertility.eval_unchecked(&e.mark) } else { 0.0 })
                    .collect()
            })
            .collect();
        let max_window = windows.iter().copied().fold(0.0, f64::max);
        Self { model, stream, windows, max_window, alpha }
    }

    pub(crate) fn alpha(&self, c: usize, j: usize) -> f64 {
        self.alpha[c][j]
    }

    fn baseline(&self, i: usize) -> f64 {
        let e = &self.stream.events[i];
        let b = &self.model.baseline;
        let r = b.rate.rate_at(e.t);
        if r == 0.0 {
            0.0
        } else {
            r * b.marks.prob(&e.mark)
        }
    }

    /// Calls `f(cause, value)` for every cause of event `i` with positive
    /// kernel value, baseline first, then parents in id order and components
    /// in index order. Returns the total.
    fn for_each_cause(&self, i: usize, mut f: impl FnMut(Cause, f64)) -> f64 {
        let events = &self.stream.events;
        let child = &events[i];
        let mut total = 0.0;
        let b = self.baseline(i);
        if b > 0.0 {
            total += b;
            f(Cause::Baseline, b);
        }
        if self.model.components.is_empty() {
            return total;
        }
        let lo = events[..i].partition_point(|e| e.t < child.t - self.max_window);
        for j in lo..i {
            let parent = &events[j];
            let delta = child.t - parent.t;
            if delta <= 0.0 {
                continue;
            }
            for (c, comp) in self.model.components.iter().enumerate() {
                let a = self.alpha[c][j];
                if a == 0.0 || delta > self.windows[c] {
                    continue;
                }
                let g = comp.transition.prob_unchecked(&parent.mark, &child.mark);
                if g == 0.0 {
                    continue;
                }
                let v = a * g * comp.delay.density(delta);
                if v > 0.0 {
                    total += v;
                    f(Cause::Kernel { parent: j, component: c }, v);
                }
            }
        }
        total
    }

    pub(crate) fn intensity(&self, i: usize) -> f64 {
        self.for_each_cause(i, |_, _| {})
    }

    /// Kernel value of one cause at event `i`.
    #[cfg(test)]
    pub(crate) fn cause_value(&self, i: usize, cause: Cause) -> f64 {
        match cause {
            Cause::Baseline => self.baseline(i),
            Cause::Kernel { parent, component } => {
                let comp = &self.model.components[component];
                let (p, e) = (&self.stream.events[parent], &self.stream.events[i]);
                let delta = e.t - p.t;
                if delta <= 0.0 || delta > self.windows[component] {
                    return 0.0;
                }
                self.alpha[component][parent]
                    * comp.transition.prob_unchecked(&p.mark, &e.mark)
                    * comp.delay.density(delta)
            }
        }
    }

    /// `Λ = ∫ μ + Σ_c Σ_j α_c(x_j) (H_c(T − t_j) − H_c(start − t_j))`.
    ///
    /// Offspring mass is not truncated: the compensator integrates the full
    /// delay law.
    pub(crate) fn compensator(&self) -> f64 {
        let s = self.stream;
        let mut total = self.model.baseline.rate.integral(s.start, s.horizon);
        for (c, comp) in self.model.components.iter().enumerate() {
            for (j, e) in s.events.iter().enumerate() {
                let a = self.alpha[c][j];
                if a > 0.0 {
                    total += a * window_mass(&comp.delay, e.t, s.start, s.horizon);
                }
            }
        }
        total
    }

    fn zero_intensity(&self, i: usize) -> Error {
        Error::ZeroIntensity { event: i, t: self.stream.events[i].t }
    }
}

/// Delay mass of a parent at `t` landing inside `[start, horizon]`.
pub(crate) fn window_mass(delay: &Delay, t: f64, start: f64, horizon: f64) -> f64 {
    let (lo, hi) = offspring_window(t, start, horizon);
    if hi <= 0.0 {
        return 0.0;
    }
    (delay.cdf(hi) - delay.cdf(lo)).max(0.0)
}

/// Delays that place a child of a parent at `t` inside `[start, horizon]`.
pub(crate) fn offspring_window(t: f64, start: f64, horizon: f64) -> (f64, f64) {
    ((start - t).max(0.0), horizon - t)
}

/// Intensity at `(t, x)` given earlier events.
pub fn intensity(model: &ModelSpec, history: &[Event], t: f64, x: &Mark) -> f64 {
    let mut total = model.baseline.rate.rate_at(t) * model.baseline.marks.prob(x);
    for comp in &model.components {
        let w = comp.delay.tail_window(model.epsilon);
        for p in history {
            let delta = t - p.t;
            if delta <= 0.0 || delta > w || !comp.scope.admits(&p.mark) {
                continue;
            }
            total += comp.fertility.eval_unchecked(&p.mark)
                * comp.transition.prob_unchecked(&p.mark, x)
                * comp.delay.density(delta);
        }
    }
    total
}

/// Point-process log-likelihood of the scored events.
pub fn log_likelihood(model: &ModelSpec, stream: &EventStream) -> Result<f64> {
    let windows = model.windows();
    log_likelihood_with(model, stream, &windows)
}

pub(crate) fn log_likelihood_with(model: &ModelSpec, stream: &EventStream, windows: &[f64]) -> Result<f64> {
    let ev = Evaluator::new(model, stream, windows);
    let logs: Vec<f64> = (0..stream.len())
        .into_par_iter()
        .map(|i| if stream.scored[i] { ev.intensity(i) } else { 1.0 })
        .collect();
    let mut sum = 0.0;
    for (i, v) in logs.into_iter().enumerate() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ev.zero_intensity(i));
        }
        sum += v.ln();
    }
    Ok(sum - ev.compensator())
}

/// Responsibilities of every candidate cause, proportional to kernel values.
pub fn e_step(model: &ModelSpec, stream: &EventStream) -> Result<Responsibilities> {
    let windows = model.windows();
    e_step_with(model, stream, &windows)
}

pub(crate) fn e_step_with(model: &ModelSpec, stream: &EventStream, windows: &[f64]) -> Result<Responsibilities> {
    let ev = Evaluator::new(model, stream, windows);
    let rows: Vec<(Vec<(Cause, f64)>, f64)> = (0..stream.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            if !stream.scored[i] {
                return (row, 0.0);
            }
            let total = ev.for_each_cause(i, |c, v| row.push((c, v)));
            (row, total)
        })
        .collect();
    let nnz = rows.iter().map(|r| r.0.len()).sum();
    let mut out = Responsibilities {
        offsets: Vec::with_capacity(rows.len() + 1),
        causes: Vec::with_capacity(nnz),
        weights: Vec::with_capacity(nnz),
        intensity: Vec::with_capacity(rows.len()),
        compensator: ev.compensator(),
    };
    out.offsets.push(0);
    for (i, (row, total)) in rows.into_iter().enumerate() {
        if stream.scored[i] && !(total > 0.0 && total.is_finite()) {
            return Err(ev.zero_intensity(i));
        }
        for (c, v) in row {
            out.causes.push(c);
            out.weights.push(v / total);
        }
        out.offsets.push(out.causes.len());
        out.intensity.push(total);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
