//! Named starting models for the feature-mark model ladder.
//!
//! | name          | baseline | fertility        | transition                       |
//! |---------------|----------|------------------|----------------------------------|
//! | `baseline`    | flat     | none             |                                  |
//! | `periodic`    | periodic | none             |                                  |
//! | `k1`          | flat     | multiplicative   | prior                            |
//! | `k2`          | flat     | multiplicative   | `g_γ`                            |
//! | `k2_constant` | flat     | constant         | `g_γ`                            |
//! | `k3`          | flat     | multiplicative   | identity                         |
//! | `k4`          | flat     | multiplicative   | mixture of prior, `g_γ`, identity |
//! | `k5`          | flat     | one per part     | `k1 + k2 + k3`                   |
//!
//! Kernel models switch to the periodic baseline with
//! [`PresetOptions::periodic`]. Initial values are derived from the data:
//! half of the events are attributed to the baseline, delays start at the
//! mean inter-event gap, and `k5` spreads its components over delay means
//! of 10×, 1× and 0.1× that gap.

use serde::{Deserialize, Serialize};

use super::{BaselineRate, BaselineSpec, KernelComponent, ModelSpec, ParentScope, DEFAULT_EPSILON};
use crate::delay::Delay;
use crate::error::{Error, Result};
use crate::event::Dataset;
use crate::fertility::Fertility;
use crate::transition::{MarkPrior, Transition};

pub const PRESETS: &[&str] = &["baseline", "periodic", "k1", "k2", "k2_constant", "k3", "k4", "k5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayFamily {
    #[default]
    Exponential,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    pub period: f64,
    pub buckets: usize,
    /// Use the periodic baseline under kernel models too.
    pub periodic: bool,
    pub delay: DelayFamily,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self { period: 24.0, buckets: 24, periodic: false, delay: DelayFamily::Exponential }
    }
}

pub fn preset(name: &str, data: &Dataset, opts: &PresetOptions) -> Result<ModelSpec> {
    let n = data.len().max(1) as f64;
    let duration = data.duration();
    if !(duration > 0.0) {
        return Err(Error::param("presets need a window of positive length"));
    }
    let rate = n / duration;
    let gap = duration / n;
    let marks = MarkPrior::empirical(data)?;
    let width = data.schema().width();

    let flat = |r: f64| BaselineRate::Homogeneous { rate: r };
    let periodic = |r: f64| BaselineRate::PeriodicStep { period: opts.period, rates: vec![r; opts.buckets.max(1)] };
    let kernel_base = |r: f64| if opts.periodic { periodic(r) } else { flat(r) };
    let delay = |mean: f64| match opts.delay {
        DelayFamily::Exponential => Delay::exponential(1.0 / mean),
        DelayFamily::Gamma => Delay::Gamma { shape: 1.0, rate: 1.0 / mean },
    };
    let mult = |total: f64| Fertility::Multiplicative {
        weights: std::iter::once(total).chain(std::iter::repeat_n(1.0, width)).collect(),
    };
    let prior = || Transition::Prior { prior: marks.clone() };
    let gamma = |g: f64| -> Result<Transition> {
        let p = marks
            .feature_prior()
            .ok_or_else(|| Error::schema("g_γ transitions need binary feature marks"))?;
        Ok(Transition::GammaMix { gamma: g, prior: p })
    };
    let component = |name: &str, fertility, transition, delay| KernelComponent {
        name: name.to_string(),
        fertility,
        transition,
        delay,
        scope: ParentScope::Any,
        transition_group: None,
    };

    let (base, components) = match name {
        "baseline" => (flat(rate), vec![]),
        "periodic" => (periodic(rate), vec![]),
        "k1" => (kernel_base(rate / 2.0), vec![component("k1", mult(0.5), prior(), delay(gap))]),
        "k2" => (kernel_base(rate / 2.0), vec![component("k2", mult(0.5), gamma(0.5)?, delay(gap))]),
        "k2_constant" => (
            kernel_base(rate / 2.0),
            vec![component("k2", Fertility::constant(0.5), gamma(0.5)?, delay(gap))],
        ),
        "k3" => (kernel_base(rate / 2.0), vec![component("k3", mult(0.5), Transition::Identity, delay(gap))]),
        "k4" => {
            let mix = Transition::Mixture {
                weights: vec![1.0 / 3.0; 3],
                parts: vec![prior(), gamma(0.5)?, Transition::Identity],
            };
            (kernel_base(rate / 2.0), vec![component("k4", mult(0.5), mix, delay(gap))])
        }
        "k5" => (
            kernel_base(rate / 2.0),
            vec![
                component("k1", mult(0.5 / 3.0), prior(), delay(10.0 * gap)),
                component("k2", mult(0.5 / 3.0), gamma(0.5)?, delay(gap)),
                component("k3", mult(0.5 / 3.0), Transition::Identity, delay(0.1 * gap)),
            ],
        ),
        other => {
            return Err(Error::param(format!("unknown preset `{other}` (known: {})", PRESETS.join(", "))))
        }
    };
    Ok(ModelSpec {
        baseline: BaselineSpec { rate: base, marks, refit_marks: true },
        components,
        normalize: false,
        epsilon: DEFAULT_EPSILON,
    })
}
