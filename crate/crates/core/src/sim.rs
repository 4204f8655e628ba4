//! Simulation by the branching construction.
//!
//! Baseline events are drawn first; each event then spawns, per component,
//! a Poisson number of children with sampled delays and marks. Generations
//! are processed until one comes out empty, and children past the horizon
//! are dropped. The parent of every event is recorded.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BaselineRate, Cause, ModelSpec, Responsibilities};
use crate::error::{Error, Result};
use crate::event::{Dataset, Event, Mark, MarkSchema};
use crate::rng::substream;

pub const DEFAULT_CAP: usize = 10_000_000;

/// Parent pointers of a simulated dataset: `parent[i]` is `(event, component)`
/// for triggered events and `None` for baseline events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalForest {
    pub parent: Vec<Option<(usize, usize)>>,
    pub generation: Vec<u32>,
}

impl CausalForest {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn max_generation(&self) -> u32 {
        self.generation.iter().copied().max().unwrap_or(0)
    }

    /// Triggered events per event: an empirical estimate of the branching ratio.
    pub fn branching_ratio(&self) -> f64 {
        if self.parent.is_empty() {
            return 0.0;
        }
        self.parent.iter().filter(|p| p.is_some()).count() as f64 / self.parent.len() as f64
    }

    /// JSON Lines: `{"id", "parent", "component", "gen"}` per event.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for (i, (p, g)) in self.parent.iter().zip(&self.generation).enumerate() {
            let line = serde_json::json!({
                "id": i,
                "parent": p.map(|p| p.0),
                "component": p.map(|p| p.1),
                "gen": g,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub forest: CausalForest,
}

/// Samples events on `[0, horizon]` from `model`, using the `simulate`
/// stream of `seed`.
pub fn simulate(model: &ModelSpec, schema: &MarkSchema, horizon: f64, seed: u64) -> Result<Simulation> {
    simulate_with_cap(model, schema, horizon, seed, DEFAULT_CAP)
}

pub fn simulate_with_cap(model: &ModelSpec, schema: &MarkSchema, horizon: f64, seed: u64, cap: usize) -> Result<Simulation> {
    if matches!(schema, MarkSchema::Composite { .. }) {
        return Err(Error::schema("node-tagged marks are simulated per graph"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::param("horizon must be finite and nonnegative"));
    }
    model.validate(schema)?;
    let mut rng = substream(seed, "simulate");
    let roots: Vec<Draft> = baseline_times(&model.baseline.rate, horizon, &mut rng)
        .into_iter()
        .map(|t| Draft { t, mark: model.baseline.marks.sample(None, &mut rng), parent: None, gen: 0 })
        .collect();
    let drafts = grow(roots, horizon, cap, &mut rng, |p, rng, out| {
        for (c, comp) in model.components.iter().enumerate() {
            if !comp.scope.admits(&p.mark) {
                continue;
            }
            let count = poisson(comp.fertility.eval_unchecked(&p.mark), rng);
            for _ in 0..count {
                let delay = comp.delay.sample(rng);
                let mark = comp.transition.sample(&p.mark, rng);
                out.push((delay, mark, c));
            }
        }
    })?;
    finish(drafts, horizon, schema.clone())
}

/// Event under construction; `parent` indexes the draft list.
pub(crate) struct Draft {
    pub t: f64,
    pub mark: Mark,
    pub parent: Option<(usize, usize)>,
    pub gen: u32,
}

/// Poisson arrival times of the baseline on `[0, horizon]`, bucket by bucket.
pub(crate) fn baseline_times<R: Rng + ?Sized>(rate: &BaselineRate, horizon: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    let mut fill = |a: f64, b: f64, r: f64, rng: &mut R| {
        if r <= 0.0 {
            return;
        }
        let mut t = a;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / r;
            if t > b {
                break;
            }
            out.push(t);
        }
    };
    match rate {
        BaselineRate::Homogeneous { rate } => fill(0.0, horizon, *rate, rng),
        BaselineRate::PeriodicStep { period, rates } => {
            let width = period / rates.len() as f64;
            let mut m = 0u64;
            loop {
                let a = m as f64 * width;
                if a >= horizon {
                    break;
                }
                let b = ((m + 1) as f64 * width).min(horizon);
                fill(a, b, rates[(m % rates.len() as u64) as usize], rng);
                m += 1;
            }
        }
    }
    out
}

/// Runs generations until none are left. `offspring` pushes `(delay, mark,
/// component)` for the children of one event.
pub(crate) fn grow<R: Rng + ?Sized>(
    roots: Vec<Draft>,
    horizon: f64,
    cap: usize,
    rng: &mut R,
    mut offspring: impl FnMut(&Draft, &mut R, &mut Vec<(f64, Mark, usize)>),
) -> Result<Vec<Draft>> {
    let mut drafts = roots;
    if drafts.len() > cap {
        return Err(Error::CapExceeded { cap, branching: 0.0 });
    }
    let mut frontier = 0..drafts.len();
    let mut kids = Vec::new();
    while !frontier.is_empty() {
        let end = frontier.end;
        for p in frontier {
            kids.clear();
            offspring(&drafts[p], rng, &mut kids);
            let (t, gen) = (drafts[p].t, drafts[p].gen);
            for (delay, mark, c) in kids.drain(..) {
                let mut tc = t + delay;
                if tc <= t {
                    tc = t.next_up();
                }
                if tc > horizon {
                    continue;
                }
                drafts.push(Draft { t: tc, mark, parent: Some((p, c)), gen: gen + 1 });
            }
            if drafts.len() > cap {
                let triggered = drafts.iter().filter(|d| d.parent.is_some()).count();
                return Err(Error::CapExceeded { cap, branching: triggered as f64 / (p + 1) as f64 });
            }
        }
        frontier = end..drafts.len();
    }
    Ok(drafts)
}

/// Sorts drafts by time (ties by creation order) and renumbers parents.
pub(crate) fn finish(drafts: Vec<Draft>, horizon: f64, schema: MarkSchema) -> Result<Simulation> {
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by(|&a, &b| drafts[a].t.total_cmp(&drafts[b].t).then(a.cmp(&b)));
    let mut rank = vec![0; drafts.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let parent = order.iter().map(|&o| drafts[o].parent.map(|(p, c)| (rank[p], c))).collect();
    let generation = order.iter().map(|&o| drafts[o].gen).collect();
    let mut drafts: Vec<Option<Draft>> = drafts.into_iter().map(Some).collect();
    let events = order
        .iter()
        .map(|&o| {
            let d = drafts[o].take().expect("each draft used once");
            Event::new(d.t, d.mark)
        })
        .collect();
    Ok(Simulation {
        dataset: Dataset::new(events, horizon, schema)?,
        forest: CausalForest { parent, generation },
    })
}

/// Poisson draw by sequential inversion; large means are split into chunks.
pub(crate) fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    const CHUNK: f64 = 500.0;
    if !(mean > 0.0) {
        return 0;
    }
    let mut left = mean;
    let mut total = 0;
    while left > 0.0 {
        let m = left.min(CHUNK);
        left -= m;
        let u: f64 = rng.random();
        let mut p = (-m).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf && p > 0.0 {
            k += 1;
            p *= m / k as f64;
            cdf += p;
        }
        total += k;
    }
    total
}

/// Share of triggered events whose most responsible cause is their true parent.
pub fn parent_recovery_score(truth: &CausalForest, z: &Responsibilities) -> Result<f64> {
    if truth.len() != z.len() {
        return Err(Error::param(format!("forest has {} events, responsibilities {}", truth.len(), z.len())));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, p) in truth.parent.iter().enumerate() {
        let Some((parent, component)) = *p else { continue };
        total += 1;
        if z.argmax(i) == Some(Cause::Kernel { parent, component }) {
            hits += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::Delay;
    use crate::engine::{BaselineSpec, KernelComponent, ParentScope};
    use crate::fertility::Fertility;
    use crate::transition::{MarkPrior, Transition};
    use rand::SeedableRng;

    fn model(base: f64, alpha: f64, transition: Transition) -> ModelSpec {
        ModelSpec {
            baseline: BaselineSpec {
                rate: BaselineRate::Homogeneous { rate: base },
                marks: MarkPrior::uniform_labels(3),
                refit_marks: true,
            },
            components: vec![KernelComponent {
                name: "k".into(),
                fertility: Fertility::constant(alpha),
                transition,
                delay: Delay::exponential(2.0),
                scope: ParentScope::Any,
                transition_group: None,
            }],
            normalize: false,
            epsilon: 1e-6,
        }
    }

    fn labels() -> MarkSchema {
        MarkSchema::Labels { count: 3 }
    }

    #[test]
    fn zero_fertility_gives_only_roots() {
        let s = simulate(&model(2.0, 0.0, Transition::Identity), &labels(), 50.0, 1).unwrap();
        assert!(!s.dataset.is_empty());
        assert!(s.forest.parent.iter().all(Option::is_none));
    }

    #[test]
    fn zero_baseline_gives_empty_dataset() {
        let s = simulate(&model(0.0, 0.5, Transition::Identity), &labels(), 50.0, 1).unwrap();
        assert!(s.dataset.is_empty());
    }

    #[test]
    fn forest_is_ordered_and_identity_copies_marks() {
        let s = simulate(&model(1.0, 0.7, Transition::Identity), &labels(), 100.0, 3).unwrap();
        let ev = s.dataset.events();
        let mut triggered = 0;
        for (i, p) in s.forest.parent.iter().enumerate() {
            if let Some((j, _)) = p {
                triggered += 1;
                assert!(ev[*j].t < ev[i].t);
                assert_eq!(ev[*j].mark, ev[i].mark);
                assert_eq!(s.forest.generation[i], s.forest.generation[*j] + 1);
            } else {
                assert_eq!(s.forest.generation[i], 0);
            }
        }
        assert!(triggered > 0);
    }

    #[test]
    fn same_seed_same_output() {
        let m = model(1.0, 0.5, Transition::Prior { prior: MarkPrior::uniform_labels(3) });
        let a = simulate(&m, &labels(), 40.0, 11).unwrap();
        let b = simulate(&m, &labels(), 40.0, 11).unwrap();
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        a.dataset.write(&mut wa).unwrap();
        b.dataset.write(&mut wb).unwrap();
        assert_eq!(wa, wb);
        assert_eq!(a.forest, b.forest);
    }

    #[test]
    fn supercritical_hits_cap() {
        let err = simulate_with_cap(&model(1.0, 1.5, Transition::Identity), &labels(), 200.0, 5, 2000).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { cap: 2000, .. }));
    }

    #[test]
    fn poisson_mean_and_variance() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        for mean in [0.3, 4.0, 750.0] {
            let n = 20_000;
            let xs: Vec<f64> = (0..n).map(|_| poisson(mean, &mut rng) as f64).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 4.0 * se, "mean {m} vs {mean}");
            assert!((v / mean - 1.0).abs() < 0.1, "variance {v} vs {mean}");
        }
    }

    #[test]
    fn periodic_baseline_respects_bucket_rates() {
        let rate = BaselineRate::PeriodicStep { period: 2.0, rates: vec![0.0, 5.0] };
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let ts = baseline_times(&rate, 100.0, &mut rng);
        assert!(ts.iter().all(|t| t.rem_euclid(2.0) >= 1.0));
        assert!((ts.len() as f64 - 250.0).abs() < 5.0 * 250f64.sqrt());
    }

    #[test]
    fn recovery_score_edge_cases() {
        let truth = CausalForest { parent: vec![None, Some((0, 0))], generation: vec![0, 1] };
        let exact = Responsibilities::from_rows(vec![
            vec![(Cause::Baseline, 1.0)],
            vec![(Cause::Baseline, 0.0), (Cause::Kernel { parent: 0, component: 0 }, 1.0)],
        ]);
        assert_eq!(parent_recovery_score(&truth, &exact).unwrap(), 1.0);
        let forced = Responsibilities::from_rows(vec![
            vec![(Cause::Baseline, 1.0)],
            vec![(Cause::Kernel { parent: 0, component: 0 }, 1.0)],
        ]);
        assert_eq!(parent_recovery_score(&truth, &forced).unwrap(), 1.0);
        let tie = Responsibilities::from_rows(vec![
            vec![(Cause::Baseline, 1.0)],
            vec![(Cause::Baseline, 0.5), (Cause::Kernel { parent: 0, component: 0 }, 0.5)],
        ]);
        assert_eq!(parent_recovery_score(&truth, &tie).unwrap(), 0.0);
        let short = Responsibilities::from_rows(vec![vec![(Cause::Baseline, 1.0)]]);
        assert!(parent_recovery_score(&truth, &short).is_err());
    }
}
