//! Expected offspring counts `α(x)` and their EM updates.
//!
//! The M-step sees each potential parent as a triple `(x_e, c_e, H_e)`: its
//! mark, the responsibility mass its children assigned to it, and the
//! delay mass of its offspring window that falls inside the observation
//! period. Every update below maximizes (or increases) the weighted Poisson
//! objective `Σ_e c_e log α(x_e) − H_e α(x_e)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Mark, MarkSchema, NodeId};

/// Smallest multiplicative weight; keeps `log α` finite.
pub const WEIGHT_FLOOR: f64 = 1e-12;

const MAX_SWEEPS: usize = 200;
const SWEEP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fertility {
    Constant {
        alpha: f64,
    },
    /// `α₀ + Σ β_i x_i`, plus optionally `Σ β⁻_i (1 − x_i)` on absent features.
    Linear {
        bias: f64,
        weights: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        absent: Option<Vec<f64>>,
    },
    /// `w₀ Π w_i^{x_i}`; `weights[0]` is the always-on bias.
    Multiplicative {
        weights: Vec<f64>,
    },
    /// Sum of linear and multiplicative terms.
    Combined {
        terms: Vec<Fertility>,
    },
    /// One rate per source node of the parent; other nodes have zero
    /// fertility. Updates pull individual rates toward the pooled rate by
    /// `pooling ∈ [0, 1]`.
    PerSource {
        sources: Vec<NodeId>,
        rates: Vec<f64>,
        #[serde(default)]
        pooling: f64,
    },
}

/// One additive piece of a linear fertility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearTerm {
    Bias,
    Present(usize),
    Absent(usize),
}

/// A parent as seen by the fertility M-step: mark, child credit, exposure.
pub type Parent<'a> = (&'a Mark, f64, f64);

impl Fertility {
    pub fn constant(alpha: f64) -> Self {
        Fertility::Constant { alpha }
    }

    /// Feature count this fertility is defined over, if it depends on the mark.
    pub fn width(&self) -> Option<usize> {
        match self {
            Fertility::Constant { .. } => None,
            Fertility::Linear { weights, .. } => Some(weights.len()),
            Fertility::Multiplicative { weights } => Some(weights.len().saturating_sub(1)),
            Fertility::Combined { terms } => terms.iter().find_map(Fertility::width),
            Fertility::PerSource { .. } => None,
        }
    }

    pub fn validate(&self, schema: &MarkSchema) -> Result<()> {
        let bad = |m: &str| Err(Error::param(format!("fertility: {m}")));
        match self {
            Fertility::Constant { alpha } => {
                if !(*alpha >= 0.0 && alpha.is_finite()) {
                    return bad("α must be finite and nonnegative");
                }
            }
            Fertility::Linear { bias, weights, absent } => {
                let all = std::iter::once(bias).chain(weights).chain(absent.iter().flatten());
                if all.clone().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad("linear coefficients must be finite and nonnegative");
                }
                if absent.as_ref().is_some_and(|a| a.len() != weights.len()) {
                    return bad("absent-feature weights must match the feature count");
                }
            }
            Fertility::Multiplicative { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return bad("multiplicative weights must be positive");
                }
            }
            Fertility::Combined { terms } => {
                if terms.is_empty() {
                    return bad("combined fertility needs at least one term");
                }
                for t in terms {
                    if !matches!(t, Fertility::Linear { .. } | Fertility::Multiplicative { .. }) {
                        return bad("combined terms must be linear or multiplicative");
                    }
                    t.validate(schema)?;
                }
                let widths: Vec<_> = terms.iter().filter_map(Fertility::width).collect();
                if widths.windows(2).any(|w| w[0] != w[1]) {
                    return bad("combined terms disagree on the feature count");
                }
            }
            Fertility::PerSource { sources, rates, pooling } => {
                if sources.len() != rates.len() || sources.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("per-source rates need strictly increasing sources, one rate each");
                }
                if rates.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad("per-source rates must be finite and nonnegative");
                }
                if !(0.0..=1.0).contains(pooling) {
                    return bad("pooling must lie in [0, 1]");
                }
            }
        }
        match self.width() {
            Some(w) if w != schema.width() => Err(Error::schema(format!(
                "fertility over {w} features, marks have {}",
                schema.width()
            ))),
            _ => Ok(()),
        }
    }

    /// `α(x)`, checking that the mark has the expected width.
    pub fn eval(&self, x: &Mark) -> Result<f64> {
        if let (Some(w), Some(f)) = (self.width(), x.features()) {
            if f.width() != w {
                return Err(Error::schema(format!("mark width {} against fertility width {w}", f.width())));
            }
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &Mark) -> f64 {
        match self {
            Fertility::Constant { alpha } => *alpha,
            Fertility::Linear { bias, weights, absent } => {
                let mut acc = *bias;
                match absent {
                    None => acc += x.active().map(|i| weights[i]).sum::<f64>(),
                    Some(a) => {
                        for i in 0..weights.len() {
                            acc += if x.is_active(i) { weights[i] } else { a[i] };
                        }
                    }
                }
                acc
            }
            Fertility::Multiplicative { weights } => {
                weights[0] * x.active().map(|i| weights[i + 1]).product::<f64>()
            }
            Fertility::Combined { terms } => terms.iter().map(|t| t.eval_unchecked(x)).sum(),
            Fertility::PerSource { sources, rates, .. } => x
                .node()
                .and_then(|n| sources.binary_search(&n).ok())
                .map_or(0.0, |k| rates[k]),
        }
    }

    /// Scales the expected offspring count of every mark by `s`.
    pub fn scaled(&self, s: f64) -> Fertility {
        match self {
            Fertility::Constant { alpha } => Fertility::Constant { alpha: alpha * s },
            Fertility::Linear { bias, weights, absent } => Fertility::Linear {
                bias: bias * s,
                weights: weights.iter().map(|w| w * s).collect(),
                absent: absent.as_ref().map(|a| a.iter().map(|w| w * s).collect()),
            },
            Fertility::Multiplicative { weights } => {
                let mut weights = weights.clone();
                weights[0] *= s;
                Fertility::Multiplicative { weights }
            }
            Fertility::Combined { terms } => Fertility::Combined {
                terms: terms.iter().map(|t| t.scaled(s)).collect(),
            },
            Fertility::PerSource { sources, rates, pooling } => Fertility::PerSource {
                sources: sources.clone(),
                rates: rates.iter().map(|r| r * s).collect(),
                pooling: *pooling,
            },
        }
    }

    /// M-step given parents' marks, child credits and exposures.
    pub fn update(&self, parents: &[Parent<'_>]) -> Result<Fertility> {
        match self {
            Fertility::Constant { .. } => {
                let credit: f64 = parents.iter().map(|p| p.1).sum();
                let exposure: f64 = parents.iter().map(|p| p.2).sum();
                Ok(Fertility::Constant { alpha: ratio(credit, exposure, "constant fertility")? })
            }
            Fertility::Linear { .. } => self.update_linear_em(parents),
            Fertility::Multiplicative { weights } => Ok(Fertility::Multiplicative {
                weights: update_multiplicative(weights, parents)?.0,
            }),
            Fertility::Combined { terms } => {
                // split each parent's credit across terms by their current values
                let values: Vec<Vec<f64>> = parents
                    .iter()
                    .map(|(x, _, _)| terms.iter().map(|t| t.eval_unchecked(x)).collect())
                    .collect();
                terms
                    .iter()
                    .enumerate()
                    .map(|(k, term)| {
                        let split: Vec<Parent<'_>> = parents
                            .iter()
                            .zip(&values)
                            .map(|(&(x, c, h), v)| {
                                let total: f64 = v.iter().sum();
                                let share = if c > 0.0 && total > 0.0 { c * v[k] / total } else { 0.0 };
                                (x, share, h)
                            })
                            .collect();
                        term.update(&split)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(|terms| Fertility::Combined { terms })
            }
            Fertility::PerSource { sources, pooling, .. } => {
                let mut n = vec![0.0; sources.len()];
                let mut m = vec![0.0; sources.len()];
                for &(x, c, h) in parents {
                    if let Some(k) = x.node().and_then(|v| sources.binary_search(&v).ok()) {
                        n[k] += c;
                        m[k] += h;
                    }
                }
                Ok(Fertility::PerSource {
                    sources: sources.clone(),
                    rates: regularized_alpha(&n, &m, *pooling)?,
                    pooling: *pooling,
                })
            }
        }
    }

    /// Whether the M-step exactly maximizes its objective; pooled per-source
    /// rates do not.
    pub fn is_exact_update(&self) -> bool {
        !matches!(self, Fertility::PerSource { pooling, .. } if *pooling > 0.0)
    }

    /// Credit split of a linear fertility over its active terms.
    pub fn allocate_linear(&self, x: &Mark) -> Result<Vec<(LinearTerm, f64)>> {
        let Fertility::Linear { bias, weights, absent } = self else {
            return Err(Error::param("credit allocation needs a linear fertility"));
        };
        let total = self.eval(x)?;
        if total <= 0.0 {
            return Err(Error::Degenerate("credit assigned to a parent with zero fertility".into()));
        }
        let mut out = vec![(LinearTerm::Bias, bias / total)];
        for i in 0..weights.len() {
            if x.is_active(i) {
                out.push((LinearTerm::Present(i), weights[i] / total));
            } else if let Some(a) = absent {
                out.push((LinearTerm::Absent(i), a[i] / total));
            }
        }
        Ok(out)
    }

    fn update_linear_em(&self, parents: &[Parent<'_>]) -> Result<Fertility> {
        let Fertility::Linear { weights, absent, .. } = self else { unreachable!() };
        let f = weights.len();
        // term layout: bias, present features, absent features
        let mut credit = vec![0.0; 1 + 2 * f];
        let mut exposure = vec![0.0; 1 + 2 * f];
        for &(x, c, h) in parents {
            exposure[0] += h;
            for i in 0..f {
                if x.is_active(i) {
                    exposure[1 + i] += h;
                } else {
                    exposure[1 + f + i] += h;
                }
            }
            if c == 0.0 {
                continue;
            }
            for (term, share) in self.allocate_linear(x)? {
                let slot = match term {
                    LinearTerm::Bias => 0,
                    LinearTerm::Present(i) => 1 + i,
                    LinearTerm::Absent(i) => 1 + f + i,
                };
                credit[slot] += c * share;
            }
        }
        let coef = update_linear(&credit, &exposure)?;
        Ok(Fertility::Linear {
            bias: coef[0],
            weights: coef[1..=f].to_vec(),
            absent: absent.as_ref().map(|_| coef[1 + f..].to_vec()),
        })
    }
}

fn ratio(credit: f64, exposure: f64, what: &str) -> Result<f64> {
    if credit <= 0.0 {
        Ok(0.0)
    } else if exposure > 0.0 {
        Ok(credit / exposure)
    } else {
        Err(Error::ZeroExposure(what.to_string()))
    }
}

/// Term-wise `credit / exposure`.
pub fn update_linear(credits: &[f64], exposures: &[f64]) -> Result<Vec<f64>> {
    credits
        .iter()
        .zip(exposures)
        .enumerate()
        .map(|(i, (&c, &e))| ratio(c, e, &format!("linear fertility term {i}")))
        .collect()
}

/// Convex combination of pooled and individual rates:
/// `α̂_i = λ Σn/Σm + (1 − λ) n_i/m_i`.
///
/// Sources with no exposure get the pooled rate. The total expected count
/// `Σ α̂_i m_i = Σ n_i` is preserved for every `λ`.
pub fn regularized_alpha(n: &[f64], m: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("pooling weight {lambda} outside [0, 1]")));
    }
    if n.len() != m.len() || n.iter().chain(m).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::param("counts and exposures must be nonnegative and of equal length"));
    }
    if let Some(i) = n.iter().zip(m).position(|(ni, mi)| *ni > 0.0 && *mi == 0.0) {
        return Err(Error::ZeroExposure(format!("source {i}")));
    }
    let (sn, sm): (f64, f64) = (n.iter().sum(), m.iter().sum());
    let pooled = if sm > 0.0 { sn / sm } else { 0.0 };
    Ok(n.iter()
        .zip(m)
        .map(|(ni, mi)| {
            let own = if *mi > 0.0 { ni / mi } else { pooled };
            lambda * pooled + (1.0 - lambda) * own
        })
        .collect())
}

/// `Σ_e c_e log α(x_e) − H_e α(x_e)` for a multiplicative fertility.
pub fn multiplicative_objective(weights: &[f64], parents: &[Parent<'_>]) -> f64 {
    let spec = Fertility::Multiplicative { weights: weights.to_vec() };
    parents
        .iter()
        .map(|&(x, c, h)| {
            let a = spec.eval_unchecked(x);
            let gain = if c > 0.0 { c * a.ln() } else { 0.0 };
            gain - h * a
        })
        .sum()
}

/// Coordinate ascent for multiplicative weights.
///
/// Each coordinate moves to its exact maximizer
/// `w_j = Σ c_e x_{e,j} / Σ x_{e,j} H_e Π_{i≠j} w_i^{x_{e,i}}`. Sweeps run in
/// index order until no weight moves by more than `1e-8` relatively, or 200
/// sweeps. Returns the weights and the objective after each sweep.
pub fn update_multiplicative(weights: &[f64], parents: &[Parent<'_>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = weights.len();
    let mut w = weights.to_vec();
    // members[j]: parents with coordinate j on (the bias is on for all)
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut numer = vec![0.0; n];
    for (e, &(x, c, _)) in parents.iter().enumerate() {
        members[0].push(e);
        numer[0] += c;
        for i in x.active() {
            members[i + 1].push(e);
            numer[i + 1] += c;
        }
    }
    let spec = |w: &[f64]| Fertility::Multiplicative { weights: w.to_vec() };
    let mut trace = vec![multiplicative_objective(&w, parents)];
    let mut floored = false;
    for _ in 0..MAX_SWEEPS {
        let current = spec(&w);
        let mut alpha: Vec<f64> = parents.iter().map(|p| current.eval_unchecked(p.0)).collect();
        let mut max_change = 0.0f64;
        for j in 0..n {
            if members[j].is_empty() {
                continue;
            }
            let denom: f64 = members[j].iter().map(|&e| parents[e].2 * alpha[e] / w[j]).sum();
            let next = if numer[j] <= 0.0 {
                if denom > 0.0 {
                    floored = true;
                }
                WEIGHT_FLOOR
            } else if denom > 0.0 {
                (numer[j] / denom).max(WEIGHT_FLOOR)
            } else {
                return Err(Error::Unbounded(j));
            };
            if next != w[j] {
                let f = next / w[j];
                for &e in &members[j] {
                    alpha[e] *= f;
                }
                max_change = max_change.max(((next - w[j]) / w[j]).abs());
                w[j] = next;
            }
        }
        let obj = multiplicative_objective(&w, parents);
        let prev = *trace.last().unwrap();
        if obj < prev - 1e-10 * prev.abs().max(1.0) {
            log::debug!("multiplicative sweep lowered the objective: {prev} -> {obj}");
        }
        trace.push(obj);
        if max_change < SWEEP_TOL {
            break;
        }
    }
    if floored {
        log::warn!("multiplicative fertility weight with no credit clamped to {WEIGHT_FLOOR:e}");
    }
    Ok((w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::FeatureSet;

    fn m(width: usize, on: &[usize]) -> Mark {
        Mark::Features(FeatureSet::new(width, on.iter().copied()).unwrap())
    }

    #[test]
    fn eval_examples() {
        let lin = Fertility::Linear { bias: 0.1, weights: vec![0.2], absent: None };
        assert!((lin.eval(&m(1, &[0])).unwrap() - 0.3).abs() < 1e-15);
        let mul = Fertility::Multiplicative { weights: vec![1.0, 2.0, 3.0] };
        assert_eq!(mul.eval(&m(2, &[0, 1])).unwrap(), 6.0);
        let mul = Fertility::Multiplicative { weights: vec![0.7, 2.0, 3.0] };
        assert_eq!(mul.eval(&m(2, &[])).unwrap(), 0.7);
        assert!(mul.eval(&m(3, &[])).is_err());
    }

    #[test]
    fn absent_weights_apply_to_inactive_features() {
        let f = Fertility::Linear { bias: 0.5, weights: vec![1.0, 2.0], absent: Some(vec![0.25, 0.125]) };
        assert_eq!(f.eval(&m(2, &[0])).unwrap(), 0.5 + 1.0 + 0.125);
    }

    #[test]
    fn allocation_examples() {
        let f = Fertility::Linear { bias: 1.0, weights: vec![1.0], absent: None };
        assert_eq!(
            f.allocate_linear(&m(1, &[0])).unwrap(),
            vec![(LinearTerm::Bias, 0.5), (LinearTerm::Present(0), 0.5)]
        );
        let f = Fertility::Linear { bias: 0.0, weights: vec![1.0, 3.0], absent: None };
        let shares = f.allocate_linear(&m(2, &[0, 1])).unwrap();
        assert_eq!(shares[1].1, 0.25);
        assert_eq!(shares[2].1, 0.75);
        let zero = Fertility::Linear { bias: 0.0, weights: vec![0.0], absent: None };
        assert!(zero.allocate_linear(&m(1, &[0])).is_err());
    }

    #[test]
    fn linear_update_ratios() {
        assert_eq!(update_linear(&[2.0, 0.0], &[4.0, 0.0]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(update_linear(&[4.0], &[8.0]).unwrap(), vec![0.5]);
        assert!(matches!(update_linear(&[1.0], &[0.0]), Err(Error::ZeroExposure(_))));
    }

    #[test]
    fn multiplicative_bias_only_closed_form() {
        let x = m(0, &[]);
        let (w, _) = update_multiplicative(&[1.0], &[(&x, 2.0, 1.0)]).unwrap();
        assert_eq!(w, vec![2.0]);
    }

    #[test]
    fn multiplicative_zero_credit_floors() {
        let x = m(1, &[0]);
        let (w, _) = update_multiplicative(&[1.0, 1.0], &[(&x, 0.0, 1.0)]).unwrap();
        assert!(w.iter().all(|v| *v == WEIGHT_FLOOR || *v < 1e-6), "{w:?}");
    }

    #[test]
    fn multiplicative_unbounded_names_coordinate() {
        let x = m(1, &[0]);
        let err = update_multiplicative(&[1.0, 1.0], &[(&x, 1.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::Unbounded(0)));
    }

    #[test]
    fn multiplicative_matches_grid_oracle() {
        // bias fixed by the data, two features; compare against a brute-force grid
        let marks = [m(2, &[]), m(2, &[0]), m(2, &[1]), m(2, &[0, 1])];
        let credits = [1.0, 3.0, 0.5, 2.5];
        let exposures = [1.0, 1.2, 0.8, 0.9];
        let parents: Vec<Parent<'_>> =
            marks.iter().zip(credits).zip(exposures).map(|((x, c), h)| (x, c, h)).collect();
        let (w, trace) = update_multiplicative(&[1.0, 1.0, 1.0], &parents).unwrap();
        assert!(trace.windows(2).all(|p| p[1] >= p[0] - 1e-10));
        let (mut best, mut arg) = (f64::NEG_INFINITY, (0.0, 0.0, 0.0));
        for a in 1..=60 {
            for b in 1..=100 {
                for c in 1..=100 {
                    let g = [a as f64 * 0.05, b as f64 * 0.05, c as f64 * 0.05];
                    let v = multiplicative_objective(&g, &parents);
                    if v > best {
                        best = v;
                        arg = (g[0], g[1], g[2]);
                    }
                }
            }
        }
        assert!((w[0] - arg.0).abs() <= 0.05 && (w[1] - arg.1).abs() <= 0.05 && (w[2] - arg.2).abs() <= 0.05);
        assert!(multiplicative_objective(&w, &parents) >= best - 1e-12);
    }

    #[test]
    fn regularized_alpha_examples() {
        let a = regularized_alpha(&[2.0, 4.0], &[10.0, 10.0], 0.5).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.35).abs() < 1e-15);
        assert_eq!(regularized_alpha(&[2.0, 4.0], &[10.0, 10.0], 1.0).unwrap(), vec![0.3, 0.3]);
        assert_eq!(regularized_alpha(&[2.0, 4.0], &[10.0, 10.0], 0.0).unwrap(), vec![0.2, 0.4]);
        assert!(matches!(regularized_alpha(&[1.0], &[0.0], 0.5), Err(Error::ZeroExposure(_))));
    }

    #[test]
    fn per_source_rates_follow_parent_node() {
        let f = Fertility::PerSource { sources: vec![1, 4], rates: vec![0.5, 2.0], pooling: 0.0 };
        assert_eq!(f.eval(&Mark::Composite { label: 0, node: 4 }).unwrap(), 2.0);
        assert_eq!(f.eval(&Mark::Composite { label: 0, node: 2 }).unwrap(), 0.0);
        let (a, b) = (Mark::Composite { label: 0, node: 1 }, Mark::Composite { label: 1, node: 4 });
        let next = f.update(&[(&a, 1.0, 4.0), (&b, 3.0, 2.0)]).unwrap();
        assert_eq!(next, Fertility::PerSource { sources: vec![1, 4], rates: vec![0.25, 1.5], pooling: 0.0 });
    }

    #[test]
    fn scaling_multiplicative_touches_bias_only() {
        let f = Fertility::Multiplicative { weights: vec![2.0, 3.0] };
        assert_eq!(f.scaled(0.5), Fertility::Multiplicative { weights: vec![1.0, 3.0] });
    }

    #[test]
    fn combined_update_increases_objective() {
        let marks = [m(1, &[]), m(1, &[0]), m(1, &[0])];
        let parents: Vec<Parent<'_>> = vec![(&marks[0], 0.5, 1.0), (&marks[1], 2.0, 1.0), (&marks[2], 1.5, 0.5)];
        let f = Fertility::Combined {
            terms: vec![
                Fertility::Linear { bias: 0.3, weights: vec![0.3], absent: None },
                Fertility::Multiplicative { weights: vec![0.3, 1.0] },
            ],
        };
        let objective = |f: &Fertility| -> f64 {
            parents.iter().map(|&(x, c, h)| c * f.eval_unchecked(x).ln() - h * f.eval_unchecked(x)).sum()
        };
        let mut cur = f;
        for _ in 0..20 {
            let next = cur.update(&parents).unwrap();
            assert!(objective(&next) >= objective(&cur) - 1e-12);
            cur = next;
        }
    }
}
