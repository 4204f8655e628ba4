//! Mark priors `g(x)` and transition densities `g(x'|x)`.
//!
//! Feature marks use an independent-Bernoulli prior and the per-feature
//! identity/prior mixture `g_γ`; categorical marks use row-stochastic
//! matrices, optionally shrunk toward a Dirichlet direction.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::delay::pick;
use crate::error::{Error, Result};
use crate::event::{Dataset, FeatureSet, Mark};

/// Independent per-feature Bernoulli probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePrior {
    pub p: Vec<f64>,
}

impl FeaturePrior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("feature probabilities must lie in [0, 1]"));
        }
        Ok(Self { p })
    }

    pub fn width(&self) -> usize {
        self.p.len()
    }

    /// `Π p_i^{x_i} (1 − p_i)^{1 − x_i}`.
    pub fn prob(&self, x: &FeatureSet) -> Result<f64> {
        if x.width() != self.p.len() {
            return Err(Error::schema(format!(
                "feature width {} against prior width {}",
                x.width(),
                self.p.len()
            )));
        }
        Ok(self.prob_unchecked(x))
    }

    pub(crate) fn prob_unchecked(&self, x: &FeatureSet) -> f64 {
        let mut acc = 1.0;
        for_each_bit(x, self.p.len(), |i, on| {
            acc *= if on { self.p[i] } else { 1.0 - self.p[i] };
        });
        acc
    }

    /// Weighted empirical fractions; returns `None` for zero total weight.
    pub fn fit_weighted<'a>(width: usize, samples: impl IntoIterator<Item = (&'a FeatureSet, f64)>) -> Option<Self> {
        let mut counts = vec![0.0; width];
        let mut total = 0.0;
        for (x, w) in samples {
            total += w;
            for i in x.active() {
                counts[i] += w;
            }
        }
        (total > 0.0).then(|| Self {
            p: counts.into_iter().map(|c| (c / total).clamp(0.0, 1.0)).collect(),
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FeatureSet {
        let bits: Vec<bool> = self.p.iter().map(|&p| rng.random::<f64>() < p).collect();
        FeatureSet::from_bits(&bits)
    }
}

/// Empirical feature frequencies of a binary-feature dataset.
pub fn fit_prior(d: &Dataset) -> Result<FeaturePrior> {
    if d.is_empty() {
        return Err(Error::param("cannot fit a feature prior on an empty dataset"));
    }
    let width = match d.schema() {
        crate::event::MarkSchema::Features { names } => names.len(),
        other => return Err(Error::schema(format!("feature prior needs binary features, got {other:?}"))),
    };
    let it = d.events().iter().filter_map(|e| e.mark.features().map(|f| (f, 1.0)));
    Ok(FeaturePrior::fit_weighted(width, it).expect("nonempty"))
}

/// Marginal mark distribution: a feature prior, or label probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkPrior {
    Features { p: Vec<f64> },
    Categorical { probs: Vec<f64> },
}

impl MarkPrior {
    pub fn uniform_labels(count: usize) -> Self {
        MarkPrior::Categorical { probs: vec![1.0 / count as f64; count] }
    }

    /// Empirical marginal of a dataset (feature fractions or label shares).
    pub fn empirical(d: &Dataset) -> Result<Self> {
        if d.schema().is_categorical() {
            let mut counts = vec![0.0; d.schema().width()];
            for e in d.events() {
                counts[e.mark.label().unwrap()] += 1.0;
            }
            let n: f64 = counts.iter().sum();
            if n == 0.0 {
                return Ok(Self::uniform_labels(counts.len()));
            }
            Ok(MarkPrior::Categorical { probs: counts.into_iter().map(|c| c / n).collect() })
        } else {
            Ok(fit_prior(d)?.into())
        }
    }

    pub fn prob(&self, x: &Mark) -> f64 {
        match (self, x) {
            (MarkPrior::Features { p }, Mark::Features(f)) => {
                let mut acc = 1.0;
                for_each_bit(f, p.len(), |i, on| acc *= if on { p[i] } else { 1.0 - p[i] });
                acc
            }
            (MarkPrior::Categorical { probs }, m) => m.label().and_then(|l| probs.get(l)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn check(&self, schema: &crate::event::MarkSchema) -> Result<()> {
        let ok = match self {
            MarkPrior::Features { p } => {
                !schema.is_categorical() && p.len() == schema.width() && p.iter().all(|v| (0.0..=1.0).contains(v))
            }
            MarkPrior::Categorical { probs } => {
                schema.is_categorical()
                    && probs.len() == schema.width()
                    && probs.iter().all(|v| *v >= 0.0)
                    && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::schema(format!("mark prior {self:?} does not fit {schema:?}")))
        }
    }

    /// Weighted refit; `None` when the weights vanish.
    pub fn fit_weighted<'a>(&self, samples: impl IntoIterator<Item = (&'a Mark, f64)>) -> Option<Self> {
        match self {
            MarkPrior::Features { p } => {
                let it = samples.into_iter().filter_map(|(m, w)| m.features().map(|f| (f, w)));
                FeaturePrior::fit_weighted(p.len(), it).map(Into::into)
            }
            MarkPrior::Categorical { probs } => {
                let mut counts = vec![0.0; probs.len()];
                for (m, w) in samples {
                    counts[m.label()?] += w;
                }
                let total: f64 = counts.iter().sum();
                (total > 0.0).then(|| MarkPrior::Categorical {
                    probs: counts.into_iter().map(|c| c / total).collect(),
                })
            }
        }
    }

    /// Draws a mark shaped like `template` (composite marks keep their node).
    pub fn sample<R: Rng + ?Sized>(&self, template: Option<&Mark>, rng: &mut R) -> Mark {
        match self {
            MarkPrior::Features { p } => Mark::Features(FeaturePrior { p: p.clone() }.sample(rng)),
            MarkPrior::Categorical { probs } => {
                let l = pick(probs, rng.random::<f64>());
                match template {
                    Some(t) => t.with_label(l),
                    None => Mark::Label(l as u32),
                }
            }
        }
    }

    pub fn feature_prior(&self) -> Option<FeaturePrior> {
        match self {
            MarkPrior::Features { p } => Some(FeaturePrior { p: p.clone() }),
            _ => None,
        }
    }
}

impl From<FeaturePrior> for MarkPrior {
    fn from(p: FeaturePrior) -> Self {
        MarkPrior::Features { p: p.p }
    }
}

/// Shrinkage target of a categorical transition matrix: one direction on the
/// simplex per source row, and a common magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    pub directions: Vec<Vec<f64>>,
    pub magnitude: f64,
}

impl DirichletPrior {
    /// The same direction for every source row.
    pub fn shared(direction: Vec<f64>, rows: usize, magnitude: f64) -> Self {
        Self { directions: vec![direction; rows], magnitude }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMatrix {
    pub rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<DirichletPrior>,
}

impl CategoricalMatrix {
    pub fn uniform(labels: usize) -> Self {
        Self { rows: vec![vec![1.0 / labels as f64; labels]; labels], prior: None }
    }

    pub fn labels(&self) -> usize {
        self.rows.len()
    }

    /// `Σ cγ log θ`: the log Dirichlet(cγ + 1) density up to a constant.
    pub fn log_prior(&self) -> f64 {
        let Some(prior) = &self.prior else { return 0.0 };
        if prior.magnitude <= 0.0 || !prior.magnitude.is_finite() {
            return 0.0;
        }
        let mut acc = 0.0;
        for (row, dir) in self.rows.iter().zip(&prior.directions) {
            for (theta, g) in row.iter().zip(dir) {
                let a = prior.magnitude * g;
                if a > 0.0 {
                    acc += a * theta.ln();
                }
            }
        }
        acc
    }
}

/// Posterior-mean (shrinkage) estimate of a row-stochastic matrix from
/// expected transition counts.
///
/// Row `r` becomes `(counts[r] + c·γ_r) / (Σ counts[r] + c)`. Without a prior
/// (or with `c = 0`) rows are plain proportions; an all-zero row then falls
/// back to uniform.
pub fn fit_categorical(counts: &[Vec<f64>], prior: Option<&DirichletPrior>) -> Result<CategoricalMatrix> {
    let labels = counts.len();
    if counts.iter().any(|r| r.len() != labels) {
        return Err(Error::param("count matrix must be square"));
    }
    if counts.iter().flatten().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(Error::param("transition counts must be nonnegative and finite"));
    }
    if let Some(p) = prior {
        if p.magnitude < 0.0 || p.magnitude.is_nan() {
            return Err(Error::param("Dirichlet magnitude must be nonnegative"));
        }
        if p.directions.len() != labels
            || p.directions
                .iter()
                .any(|d| d.len() != labels || d.iter().any(|v| *v < 0.0) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9)
        {
            return Err(Error::param("Dirichlet directions must be simplex rows"));
        }
    }
    let rows = counts
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let total: f64 = row.iter().sum();
            match prior {
                Some(p) if p.magnitude.is_infinite() => p.directions[r].clone(),
                Some(p) if p.magnitude > 0.0 => {
                    let c = p.magnitude;
                    row.iter()
                        .zip(&p.directions[r])
                        .map(|(n, g)| (n + c * g) / (total + c))
                        .collect()
                }
                _ if total > 0.0 => row.iter().map(|n| n / total).collect(),
                _ => {
                    log::warn!("transition row {r} has no counts; using a uniform row");
                    vec![1.0 / labels as f64; labels]
                }
            }
        })
        .collect();
    Ok(CategoricalMatrix { rows, prior: prior.cloned() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    /// Offspring copy the parent's mark (`g₀`).
    Identity,
    /// Offspring marks drawn from a fixed marginal, ignoring the parent (`g₁`).
    Prior { prior: MarkPrior },
    /// Per-feature mixture of copying and redrawing from the prior (`g_γ`).
    GammaMix { gamma: f64, prior: FeaturePrior },
    Categorical(CategoricalMatrix),
    /// `Σ η_j g_j(x'|x)` with shared fertility and delay.
    Mixture { weights: Vec<f64>, parts: Vec<Transition> },
}

impl Transition {
    pub fn validate(&self, schema: &crate::event::MarkSchema) -> Result<()> {
        match self {
            Transition::Identity => Ok(()),
            Transition::Prior { prior } => prior.check(schema),
            Transition::GammaMix { gamma, prior } => {
                if !(0.0..=1.0).contains(gamma) {
                    return Err(Error::param(format!("γ = {gamma} outside [0, 1]")));
                }
                MarkPrior::from(prior.clone()).check(schema)
            }
            Transition::Categorical(m) => {
                if !schema.is_categorical() || m.labels() != schema.width() {
                    return Err(Error::schema("categorical transition needs a label schema of matching size"));
                }
                for row in &m.rows {
                    if row.len() != m.labels() || row.iter().any(|v| *v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::param("transition rows must be stochastic"));
                    }
                }
                Ok(())
            }
            Transition::Mixture { weights, parts } => {
                if weights.len() != parts.len()
                    || parts.is_empty()
                    || weights.iter().any(|w| *w < 0.0)
                    || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(Error::param("mixture weights must be a distribution over parts"));
                }
                parts.iter().try_for_each(|p| p.validate(schema))
            }
        }
    }

    /// `g(x'|x)`. Feature/label kind mismatches are schema errors.
    pub fn prob(&self, x: &Mark, x_next: &Mark) -> Result<f64> {
        match (self, x, x_next) {
            (Transition::GammaMix { prior, .. }, Mark::Features(a), Mark::Features(b)) => {
                if a.width() != prior.width() || b.width() != prior.width() {
                    return Err(Error::schema("feature width differs from the transition prior"));
                }
            }
            (Transition::GammaMix { .. }, _, _) => {
                return Err(Error::schema("g_γ transition needs binary feature marks"));
            }
            (Transition::Categorical(m), a, b) => match (a.label(), b.label()) {
                (Some(i), Some(j)) if i < m.labels() && j < m.labels() => {}
                _ => return Err(Error::schema("categorical transition needs in-range labels")),
            },
            (_, Mark::Features(_), Mark::Features(_)) => {}
            (_, a, b) if a.label().is_some() && b.label().is_some() => {}
            _ => return Err(Error::schema("parent and child marks have different kinds")),
        }
        Ok(self.prob_unchecked(x, x_next))
    }

    pub(crate) fn prob_unchecked(&self, x: &Mark, x_next: &Mark) -> f64 {
        match self {
            Transition::Identity => match (x, x_next) {
                (Mark::Features(a), Mark::Features(b)) => f64::from(u8::from(a == b)),
                _ => f64::from(u8::from(x.label() == x_next.label())),
            },
            Transition::Prior { prior } => prior.prob(x_next),
            Transition::GammaMix { gamma, prior } => match (x, x_next) {
                (Mark::Features(a), Mark::Features(b)) => gamma_mix_prob(*gamma, &prior.p, a, b),
                _ => 0.0,
            },
            Transition::Categorical(m) => match (x.label(), x_next.label()) {
                (Some(i), Some(j)) => m.rows[i][j],
                _ => 0.0,
            },
            Transition::Mixture { weights, parts } => weights
                .iter()
                .zip(parts)
                .map(|(w, p)| if *w > 0.0 { w * p.prob_unchecked(x, x_next) } else { 0.0 })
                .sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, parent: &Mark, rng: &mut R) -> Mark {
        match self {
            Transition::Identity => parent.clone(),
            Transition::Prior { prior } => prior.sample(Some(parent), rng),
            Transition::GammaMix { gamma, prior } => {
                let f = parent.features().expect("g_γ over feature marks");
                let bits: Vec<bool> = f
                    .bits()
                    .into_iter()
                    .zip(&prior.p)
                    .map(|(bit, &p)| {
                        if rng.random::<f64>() < *gamma {
                            rng.random::<f64>() < p
                        } else {
                            bit
                        }
                    })
                    .collect();
                Mark::Features(FeatureSet::from_bits(&bits))
            }
            Transition::Categorical(m) => {
                let row = &m.rows[parent.label().expect("categorical transition over labels")];
                parent.with_label(pick(row, rng.random::<f64>()))
            }
            Transition::Mixture { weights, parts } => {
                parts[pick(weights, rng.random::<f64>())].sample(parent, rng)
            }
        }
    }

    /// Log-prior contribution of Dirichlet-shrunk matrices inside this transition.
    pub fn log_prior(&self) -> f64 {
        match self {
            Transition::Categorical(m) => m.log_prior(),
            Transition::Mixture { parts, .. } => parts.iter().map(Transition::log_prior).sum(),
            _ => 0.0,
        }
    }

    /// M-step from weighted `(parent mark, child mark, weight)` triples.
    pub fn fit_weighted(&self, samples: &[(&Mark, &Mark, f64)]) -> Result<Transition> {
        if samples.iter().map(|s| s.2).sum::<f64>() <= 0.0 {
            return Ok(self.clone());
        }
        match self {
            Transition::Identity => Ok(Transition::Identity),
            Transition::Prior { prior } => Ok(Transition::Prior {
                prior: prior
                    .fit_weighted(samples.iter().map(|(_, c, w)| (*c, *w)))
                    .unwrap_or_else(|| prior.clone()),
            }),
            Transition::GammaMix { prior, .. } => {
                let pairs: Vec<_> = samples
                    .iter()
                    .filter_map(|(a, b, w)| Some((a.features()?, b.features()?, *w)))
                    .collect();
                Ok(Transition::GammaMix { gamma: fit_gamma(&pairs, prior)?, prior: prior.clone() })
            }
            Transition::Categorical(m) => {
                let l = m.labels();
                let mut counts = vec![vec![0.0; l]; l];
                for (a, b, w) in samples {
                    if let (Some(i), Some(j)) = (a.label(), b.label()) {
                        counts[i][j] += w;
                    }
                }
                Ok(Transition::Categorical(fit_categorical(&counts, m.prior.as_ref())?))
            }
            Transition::Mixture { weights, parts } => {
                let k = parts.len();
                let mut shares: Vec<Vec<(&Mark, &Mark, f64)>> = vec![Vec::with_capacity(samples.len()); k];
                let mut totals = vec![0.0; k];
                let mut vals = vec![0.0; k];
                for &(a, b, w) in samples {
                    let mut norm = 0.0;
                    for j in 0..k {
                        vals[j] = if weights[j] > 0.0 { weights[j] * parts[j].prob_unchecked(a, b) } else { 0.0 };
                        norm += vals[j];
                    }
                    if norm <= 0.0 || w == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let r = w * vals[j] / norm;
                        if r > 0.0 {
                            shares[j].push((a, b, r));
                            totals[j] += r;
                        }
                    }
                }
                let sum: f64 = totals.iter().sum();
                let parts = parts
                    .iter()
                    .zip(&shares)
                    .map(|(p, s)| p.fit_weighted(s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Transition::Mixture { weights: totals.into_iter().map(|t| t / sum).collect(), parts })
            }
        }
    }
}

/// `Π_i ((1−γ)·1{x_i = x'_i} + γ·Bern(x'_i; p_i))`, accumulated in log space.
fn gamma_mix_prob(gamma: f64, p: &[f64], x: &FeatureSet, y: &FeatureSet) -> f64 {
    let mut log = 0.0;
    let mut xi = x.active().peekable();
    let mut yi = y.active().peekable();
    for (i, &pi) in p.iter().enumerate() {
        let a = xi.next_if_eq(&i).is_some();
        let b = yi.next_if_eq(&i).is_some();
        let q = if b { pi } else { 1.0 - pi };
        let same = if a == b { 1.0 - gamma } else { 0.0 };
        log += (same + gamma * q).ln();
    }
    log.exp()
}

fn for_each_bit(x: &FeatureSet, width: usize, mut f: impl FnMut(usize, bool)) {
    let mut it = x.active().peekable();
    for i in 0..width {
        f(i, it.next_if_eq(&i).is_some());
    }
}

/// Weighted maximum-likelihood `γ` of `g_γ` with the prior held fixed.
///
/// Each feature factor is `A + γB` with `A = 1{x_i = x'_i}` and
/// `B = Bern(x'_i; p_i) − A`, so the objective is a weighted sum of logs of
/// affine functions: concave on `[0, 1]`. Weights are pooled over the four
/// `(A, x'_i)` cases per feature and the derivative root is bisected.
pub fn fit_gamma(samples: &[(&FeatureSet, &FeatureSet, f64)], prior: &FeaturePrior) -> Result<f64> {
    let f = prior.width();
    // pooled[i][same][child bit]
    let mut pooled = vec![[[0.0f64; 2]; 2]; f];
    let mut total = 0.0;
    for &(a, b, w) in samples {
        if w < 0.0 {
            return Err(Error::param("negative transition weight"));
        }
        if w == 0.0 {
            continue;
        }
        total += w;
        let mut ai = a.active().peekable();
        let mut bi = b.active().peekable();
        for (i, cell) in pooled.iter_mut().enumerate() {
            let x = ai.next_if_eq(&i).is_some();
            let y = bi.next_if_eq(&i).is_some();
            cell[usize::from(x == y)][usize::from(y)] += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::ZeroWeight("g_γ transition samples"));
    }
    // (weight, A, B) terms; factors identically zero carry no information
    let mut terms = Vec::with_capacity(4 * f);
    let mut pole_at_zero = false;
    for (i, cell) in pooled.iter().enumerate() {
        for same in 0..2 {
            for bit in 0..2 {
                let w = cell[same][bit];
                if w == 0.0 {
                    continue;
                }
                let a = same as f64;
                let q = if bit == 1 { prior.p[i] } else { 1.0 - prior.p[i] };
                let b = q - a;
                if a == 0.0 && q == 0.0 {
                    continue;
                }
                if a == 0.0 {
                    pole_at_zero = true;
                }
                terms.push((w, a, b));
            }
        }
    }
    let slope = |g: f64| -> f64 { terms.iter().map(|&(w, a, b)| w * b / (a + g * b)).sum() };
    if !pole_at_zero && slope(0.0) <= 0.0 {
        return Ok(0.0);
    }
    if slope(1.0) >= 0.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Writes a labelled matrix as CSV: header `from,<labels>`, one row per source.
pub fn write_matrix_csv(mut w: impl Write, labels: &[String], rows: &[(String, Vec<f64>)]) -> std::io::Result<()> {
    writeln!(w, "from,{}", labels.join(","))?;
    for (name, row) in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{name},{}", cells.join(","))?;
    }
    Ok(())
}

/// `log(g(x, x') / p(x'))` per cell: positive where a transition is more
/// likely than the marginal.
pub fn log_ratio_rows(rows: &[(String, Vec<f64>)], marginal: &[f64]) -> Vec<(String, Vec<f64>)> {
    rows.iter()
        .map(|(name, row)| (name.clone(), row.iter().zip(marginal).map(|(g, p)| (g / p).ln()).collect()))
        .collect()
}
