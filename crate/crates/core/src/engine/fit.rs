//! M-step, normalization and the EM loop.

use serde::{Deserialize, Serialize};

use super::{
    e_step_with, log_likelihood, offspring_window, window_mass, Cause, EventStream, Evaluator, ModelSpec,
    Responsibilities,
};
use crate::error::{Error, Result};
use crate::event::Mark;

/// Refits every part of `model` from responsibilities computed under it.
///
/// Order: baseline, transitions (pooled per group), then per component the
/// delay (with the current fertility as exposure weight) followed by the
/// fertility (with exposures under the new delay).
pub fn m_step(model: &ModelSpec, stream: &EventStream, z: &Responsibilities) -> Result<ModelSpec> {
    let events = stream.events();
    let n = events.len();
    if z.len() != n {
        return Err(Error::param("responsibilities do not match the stream"));
    }
    let nc = model.components.len();
    let rate = &model.baseline.rate;
    let mut base_credit = vec![0.0; rate.buckets()];
    let mut base_marks: Vec<(&Mark, f64)> = Vec::new();
    let mut samples: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); nc];
    for (i, e) in events.iter().enumerate() {
        for (cause, w) in z.row(i) {
            match cause {
                Cause::Baseline => {
                    base_credit[rate.bucket(e.t)] += w;
                    base_marks.push((&e.mark, w));
                }
                Cause::Kernel { parent, component } => samples[component].push((parent, i, w)),
            }
        }
    }

    let mut out = model.clone();
    let exposure = rate.exposures(stream.start(), stream.horizon());
    let rates = base_credit
        .iter()
        .zip(&exposure)
        .enumerate()
        .map(|(k, (c, e))| match (*c > 0.0, *e > 0.0) {
            (false, _) => Ok(0.0),
            (true, true) => Ok(c / e),
            (true, false) => Err(Error::ZeroExposure(format!("baseline bucket {k}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    out.baseline.rate = rate.with_rates(rates);
    if model.baseline.refit_marks {
        if let Some(m) = model.baseline.marks.fit_weighted(base_marks) {
            out.baseline.marks = m;
        }
    }

    for group in model.transition_groups() {
        let pairs: Vec<(&Mark, &Mark, f64)> = group
            .iter()
            .flat_map(|&c| samples[c].iter().map(|&(j, i, w)| (&events[j].mark, &events[i].mark, w)))
            .collect();
        let fitted = model.components[group[0]].transition.fit_weighted(&pairs)?;
        for &c in &group {
            out.components[c].transition = fitted.clone();
        }
    }

    let windows = model.windows();
    let ev = Evaluator::new(model, stream, &windows);
    for (c, comp) in model.components.iter().enumerate() {
        let parents: Vec<usize> = (0..n).filter(|&j| comp.scope.admits(&events[j].mark)).collect();
        let delays: Vec<(f64, f64)> = samples[c].iter().map(|&(j, i, w)| (events[i].t - events[j].t, w)).collect();
        let total: f64 = delays.iter().map(|d| d.1).sum();
        let delay = if total > 0.0 {
            let exposures: Vec<(f64, f64, f64)> = parents
                .iter()
                .map(|&j| {
                    let (lo, hi) = offspring_window(events[j].t, stream.start(), stream.horizon());
                    (ev.alpha(c, j), lo, hi)
                })
                .collect();
            match comp.delay.fit_with_exposure(&delays, &exposures) {
                // too few distinct delays to move the shape; keeping the current
                // delay leaves this block of the objective unchanged
                Err(Error::Degenerate(why)) => {
                    log::warn!("component `{}` keeps its delay: {why}", comp.name);
                    comp.delay.clone()
                }
                other => other?,
            }
        } else {
            comp.delay.clone()
        };

        let mut credit = vec![0.0; n];
        for &(j, _, w) in &samples[c] {
            credit[j] += w;
        }
        let fparents: Vec<(&Mark, f64, f64)> = parents
            .iter()
            .map(|&j| {
                let h = window_mass(&delay, events[j].t, stream.start(), stream.horizon());
                (&events[j].mark, credit[j], h)
            })
            .collect();
        let fertility = comp.fertility.update(&fparents)?;
        out.components[c].delay = delay;
        out.components[c].fertility = fertility;
    }
    Ok(out)
}

/// Scales all rates by `N / Λ` so the compensator matches the scored count.
pub fn normalize(model: &ModelSpec, stream: &EventStream) -> Result<ModelSpec> {
    let n = stream.scored_count() as f64;
    if n == 0.0 {
        return Ok(model.clone());
    }
    let windows = model.windows();
    let lambda = Evaluator::new(model, stream, &windows).compensator();
    if !(lambda > 0.0) {
        return Err(Error::Degenerate("compensator is zero but events were observed".into()));
    }
    Ok(model.scaled(n / lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once the relative objective gain falls below this.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

/// Per-iteration traces (entry 0 is the initial model) and the final model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_ll: Vec<f64>,
    /// `train_ll` plus the log-prior of shrunk transitions.
    pub objective: Vec<f64>,
    /// Held-out log-likelihood, when a test stream was supplied.
    pub test_ll: Vec<f64>,
    pub fertility_shares: Vec<Vec<f64>>,
    pub delay_means: Vec<Vec<f64>>,
    pub model: ModelSpec,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs EM from `model` until the relative objective gain drops below
/// `opts.tol` or `opts.max_iters` iterations.
///
/// Truncation windows only grow during a fit, so the truncated intensity
/// never loses terms between iterations and the objective is monotone.
pub fn fit(model: &ModelSpec, stream: &EventStream, opts: &FitOptions, test: Option<&EventStream>) -> Result<FitReport> {
    model.validate(stream.schema())?;
    let mut windows = model.windows();
    let mut current = model.clone();
    let mut z = e_step_with(&current, stream, &windows)?;
    let mut report = FitReport {
        train_ll: Vec::new(),
        objective: Vec::new(),
        test_ll: Vec::new(),
        fertility_shares: Vec::new(),
        delay_means: Vec::new(),
        model: current.clone(),
        iterations: 0,
        converged: false,
    };
    record(&mut report, &current, stream, test, z.log_likelihood());
    let check = current.monotone();
    for iteration in 1..=opts.max_iters {
        let mut next = m_step(&current, stream, &z)?;
        if next.normalize {
            next = normalize(&next, stream)?;
        }
        for (w, nw) in windows.iter_mut().zip(next.windows()) {
            *w = w.max(nw);
        }
        let next_z = e_step_with(&next, stream, &windows)?;
        let before = *report.objective.last().unwrap();
        record(&mut report, &next, stream, test, next_z.log_likelihood());
        let after = *report.objective.last().unwrap();
        if check && after < before - 1e-8 * before.abs() {
            return Err(Error::LikelihoodDecrease { iteration, before, after });
        }
        current = next;
        z = next_z;
        report.iterations = iteration;
        if ((after - before) / before.abs().max(f64::MIN_POSITIVE)).abs() < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.model = current;
    Ok(report)
}

fn record(report: &mut FitReport, model: &ModelSpec, stream: &EventStream, test: Option<&EventStream>, ll: f64) {
    report.train_ll.push(ll);
    report.objective.push(ll + model.log_prior());
    if let Some(t) = test {
        let v = log_likelihood(model, t).unwrap_or_else(|e| {
            log::warn!("held-out likelihood undefined: {e}");
            f64::NEG_INFINITY
        });
        report.test_ll.push(v);
    }
    report.fertility_shares.push(model.fertility_shares(stream));
    report.delay_means.push(model.delay_means());
}
