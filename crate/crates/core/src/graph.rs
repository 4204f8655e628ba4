//! Per-node models over a directed graph.
//!
//! Events carry a node and a label. Node `v` is modelled on its own as a
//! baseline plus a self-excitation component and, depending on the variant,
//! components triggered by events on its in-neighbors. The process over all
//! nodes is the superposition, so the graph log-likelihood is the sum of the
//! per-node ones.
//!
//! Fitting runs in rounds: every node is fitted independently under the
//! current shared hyperparameters (Dirichlet directions for the transition
//! rows, a shrinkage magnitude and a pooling weight), then the pooled
//! expected transition counts become the new directions and the magnitude
//! is picked by pooled validation likelihood.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::Delay;
use crate::engine::{
    e_step, fit, log_likelihood, BaselineRate, BaselineSpec, Cause, EventStream, FitOptions, KernelComponent,
    ModelSpec, ParentScope,
};
use crate::error::{Error, Result};
use crate::event::{Dataset, Mark, MarkSchema, NodeId};
use crate::fertility::Fertility;
use crate::rng::substream;
use crate::sim::{baseline_times, finish, grow, poisson, Draft, Simulation, DEFAULT_CAP};
use crate::transition::{CategoricalMatrix, DirichletPrior, MarkPrior, Transition};

/// Directed graph; an edge `u → v` lets events on `u` trigger events on `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    incoming: Vec<Vec<NodeId>>,
    outgoing: Vec<Vec<NodeId>>,
}

#[derive(Deserialize)]
struct GraphRecord {
    node: String,
    #[serde(default)]
    out: Vec<String>,
}

impl Graph {
    /// Builds a graph from node names and `(from, to)` edges. Self-loops and
    /// duplicate edges are dropped.
    pub fn from_edges(names: Vec<String>, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        let n = names.len();
        let mut index = HashMap::with_capacity(n);
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i as NodeId).is_some() {
                return Err(Error::param(format!("node `{name}` listed twice")));
            }
        }
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u as usize >= n || v as usize >= n {
                return Err(Error::UnknownNode { node: format!("#{}", u.max(v)), line: None });
            }
            if u != v {
                outgoing[u as usize].push(v);
                incoming[v as usize].push(u);
            }
        }
        for list in incoming.iter_mut().chain(outgoing.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { names, index, incoming, outgoing })
    }

    /// JSON Lines, one `{"node": name, "out": [names]}` record per node.
    /// Every edge target must have its own record.
    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GraphRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
            records.push((idx + 1, rec));
        }
        let names: Vec<String> = records.iter().map(|r| r.1.node.clone()).collect();
        let lookup: HashMap<&str, NodeId> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i as NodeId)).collect();
        let mut edges = Vec::new();
        for (u, (line, rec)) in records.iter().enumerate() {
            for target in &rec.out {
                let v = lookup
                    .get(target.as_str())
                    .ok_or_else(|| Error::UnknownNode { node: target.clone(), line: Some(*line) })?;
                edges.push((u as NodeId, *v));
            }
        }
        Self::from_edges(names, &edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    /// In-neighbors of `v`: nodes whose events may trigger events on `v`.
    pub fn incoming(&self, v: NodeId) -> &[NodeId] {
        &self.incoming[v as usize]
    }

    pub fn outgoing(&self, u: NodeId) -> &[NodeId] {
        &self.outgoing[u as usize]
    }
}

/// Events relevant to one node, as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeView {
    pub node: NodeId,
    /// Events on the node itself.
    pub own: Vec<usize>,
    /// Candidate parents: own events and events on in-neighbors, ascending.
    pub causes: Vec<usize>,
}

pub fn build_neighborhoods(graph: &Graph, data: &Dataset) -> Result<Vec<NodeView>> {
    let mut by_node: Vec<Vec<usize>> = vec![Vec::new(); graph.len()];
    for (i, e) in data.events().iter().enumerate() {
        let v = e.mark.node().ok_or_else(|| Error::schema("graph fitting needs node-tagged marks"))?;
        let slot = by_node.get_mut(v as usize).ok_or_else(|| Error::UnknownNode {
            node: data.schema().node_name(v).unwrap_or("?").to_string(),
            line: None,
        })?;
        slot.push(i);
    }
    Ok((0..graph.len() as NodeId)
        .map(|v| {
            let own = by_node[v as usize].clone();
            let mut causes = own.clone();
            for &u in graph.incoming(v) {
                causes.extend(&by_node[u as usize]);
            }
            causes.sort_unstable();
            NodeView { node: v, own, causes }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Only the node's own events trigger.
    NoNeighbors,
    /// Neighbor events trigger with their own rate and delay but share the
    /// self transition.
    SharedNeighborTransition,
    /// Neighbor events have their own transition.
    SeparateNeighborTransitions,
    /// Like separate transitions, with one rate per in-neighbor.
    PerNeighborIntensity,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoNeighbors,
        Variant::SharedNeighborTransition,
        Variant::SeparateNeighborTransitions,
        Variant::PerNeighborIntensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoNeighbors => "no_neighbors",
            Variant::SharedNeighborTransition => "shared_neighbor_transition",
            Variant::SeparateNeighborTransitions => "separate_neighbor_transitions",
            Variant::PerNeighborIntensity => "per_neighbor_intensity",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param(format!("unknown variant `{s}`")))
    }
}

/// Hyperparameters shared by all nodes within a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedHyperparams {
    /// Dirichlet directions for self-transition rows (one per source label).
    pub same: Vec<Vec<f64>>,
    /// Directions for neighbor-transition rows.
    pub neighbor: Vec<Vec<f64>>,
    pub magnitude: f64,
    /// Pull of per-neighbor rates toward their pooled value.
    pub pooling: f64,
    pub round: usize,
}

impl SharedHyperparams {
    pub fn uniform(labels: usize) -> Self {
        let rows = vec![vec![1.0 / labels as f64; labels]; labels];
        Self { same: rows.clone(), neighbor: rows, magnitude: 0.0, pooling: 0.0, round: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFitConfig {
    pub variant: Variant,
    pub rounds: usize,
    /// EM iterations per node per round.
    pub inner_iters: usize,
    /// Settings of the final fit on the full training window.
    pub polish: FitOptions,
    /// Share of the training window used for fitting; the rest validates.
    pub validation_split: f64,
    pub magnitudes: Vec<f64>,
    /// Only used by [`Variant::PerNeighborIntensity`].
    pub poolings: Vec<f64>,
    pub workers: usize,
    pub epsilon: f64,
}

impl Default for GraphFitConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SharedNeighborTransition,
            rounds: 3,
            inner_iters: 3,
            polish: FitOptions { max_iters: 100, tol: 1e-6 },
            validation_split: 0.8,
            magnitudes: vec![0.1, 1.0, 10.0, 100.0],
            poolings: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            workers: 1,
            epsilon: crate::engine::DEFAULT_EPSILON,
        }
    }
}

impl GraphFitConfig {
    /// `(magnitude, pooling)` pairs tried every round, least shrinkage first.
    pub fn candidates(&self) -> Vec<(f64, f64)> {
        let poolings: &[f64] = if self.variant == Variant::PerNeighborIntensity { &self.poolings } else { &[0.0] };
        let mut out = Vec::new();
        for &c in &self.magnitudes {
            for &l in poolings {
                out.push((c, l));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if !(self.validation_split > 0.0 && self.validation_split < 1.0) {
            return Err(Error::param("validation split must lie in (0, 1)"));
        }
        if self.magnitudes.is_empty() || self.magnitudes.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::param("magnitude grid must be nonempty and nonnegative"));
        }
        if self.poolings.is_empty() || self.poolings.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::param("pooling grid must be nonempty within [0, 1]"));
        }
        if self.workers == 0 {
            return Err(Error::param("at least one worker is needed"));
        }
        Ok(())
    }
}

/// One node's model in context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodModel {
    pub node: String,
    pub variant: Variant,
    pub model: ModelSpec,
}

/// Stream of a node's candidate causes up to `horizon`; own events after
/// `after` (or from `start` when `after` is `None`) are scored.
fn node_stream(data: &Dataset, view: &NodeView, start: f64, after: Option<f64>, horizon: f64) -> Result<EventStream> {
    let mut events = Vec::new();
    let mut scored = Vec::new();
    let mut own = view.own.iter().peekable();
    for &i in &view.causes {
        let e = &data.events()[i];
        if e.t > horizon {
            break;
        }
        let is_own = own.next_if_eq(&&i).is_some();
        events.push(e.clone());
        scored.push(is_own && after.is_none_or(|a| e.t > a) && e.t >= start);
    }
    EventStream::new(events, scored, after.unwrap_or(start), horizon, data.schema().clone())
}

/// Starting model of a node under `variant`.
#[allow(clippy::too_many_arguments)]
pub fn initial_node_model(
    graph: &Graph,
    v: NodeId,
    variant: Variant,
    marginal: &[f64],
    hyper: &SharedHyperparams,
    own_count: usize,
    duration: f64,
    epsilon: f64,
) -> ModelSpec {
    let rate = own_count.max(1) as f64 / duration;
    let delay = Delay::exponential((own_count as f64 + 1.0) / duration);
    let categorical = |dirs: &[Vec<f64>]| {
        Transition::Categorical(CategoricalMatrix {
            rows: dirs.to_vec(),
            prior: Some(DirichletPrior { directions: dirs.to_vec(), magnitude: hyper.magnitude }),
        })
    };
    let mut self_c = KernelComponent {
        name: "self".into(),
        fertility: Fertility::constant(0.2),
        transition: categorical(&hyper.same),
        delay: delay.clone(),
        scope: ParentScope::Node { node: v },
        transition_group: None,
    };
    let mut components = Vec::new();
    match variant {
        Variant::NoNeighbors => components.push(self_c),
        Variant::SharedNeighborTransition => {
            self_c.transition_group = Some("shared".into());
            let mut n = self_c.clone();
            n.name = "neighbors".into();
            n.fertility = Fertility::constant(0.1);
            n.scope = ParentScope::NotNode { node: v };
            components.push(self_c);
            components.push(n);
        }
        Variant::SeparateNeighborTransitions | Variant::PerNeighborIntensity => {
            let fertility = if variant == Variant::PerNeighborIntensity {
                let sources = graph.incoming(v).to_vec();
                Fertility::PerSource { rates: vec![0.1; sources.len()], sources, pooling: hyper.pooling }
            } else {
                Fertility::constant(0.1)
            };
            components.push(self_c);
            components.push(KernelComponent {
                name: "neighbors".into(),
                fertility,
                transition: categorical(&hyper.neighbor),
                delay,
                scope: ParentScope::NotNode { node: v },
                transition_group: None,
            });
        }
    }
    ModelSpec {
        baseline: BaselineSpec {
            rate: BaselineRate::Homogeneous { rate },
            marks: MarkPrior::Categorical { probs: marginal.to_vec() },
            refit_marks: false,
        },
        components,
        normalize: false,
        epsilon,
    }
}

/// `model` with its transition priors and pooling replaced by `hyper`.
fn with_hyper(model: &ModelSpec, hyper: &SharedHyperparams) -> ModelSpec {
    let mut m = model.clone();
    for c in &mut m.components {
        let dirs = if c.name == "self" || c.transition_group.is_some() { &hyper.same } else { &hyper.neighbor };
        if let Transition::Categorical(t) = &mut c.transition {
            t.prior = Some(DirichletPrior { directions: dirs.clone(), magnitude: hyper.magnitude });
            if hyper.magnitude.is_infinite() {
                t.rows = dirs.clone();
            }
        }
        if let Fertility::PerSource { pooling, .. } = &mut c.fertility {
            *pooling = hyper.pooling;
        }
    }
    m
}

/// Expected transition counts of a node, split into self and neighbor parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    pub same: Vec<Vec<f64>>,
    pub neighbor: Vec<Vec<f64>>,
}

impl TransitionCounts {
    pub fn zeros(labels: usize) -> Self {
        Self { same: vec![vec![0.0; labels]; labels], neighbor: vec![vec![0.0; labels]; labels] }
    }

    fn add(&mut self, other: &TransitionCounts) {
        for (a, b) in self.same.iter_mut().flatten().zip(other.same.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.neighbor.iter_mut().flatten().zip(other.neighbor.iter().flatten()) {
            *a += b;
        }
    }
}

fn transition_counts(model: &ModelSpec, stream: &EventStream, labels: usize) -> Result<TransitionCounts> {
    let z = e_step(model, stream)?;
    let mut out = TransitionCounts::zeros(labels);
    let events = stream.events();
    for (i, e) in events.iter().enumerate() {
        for (cause, w) in z.row(i) {
            if let Cause::Kernel { parent, component } = cause {
                let comp = &model.components[component];
                let target = if comp.name == "self" || comp.transition_group.is_some() {
                    &mut out.same
                } else {
                    &mut out.neighbor
                };
                let (a, b) = (events[parent].mark.label().unwrap(), e.mark.label().unwrap());
                target[a][b] += w;
            }
        }
    }
    Ok(out)
}

/// Result of fitting one node under one candidate.
#[derive(Debug, Clone)]
pub struct NodeFit {
    pub model: ModelSpec,
    pub counts: TransitionCounts,
    pub fit_ll: f64,
    pub validation_ll: f64,
}

/// Fits node `view` for `iters` EM iterations on the fitting part of the
/// training window and scores the validation part.
pub fn fit_node(
    data: &Dataset,
    view: &NodeView,
    start_model: &ModelSpec,
    hyper: &SharedHyperparams,
    cut: f64,
    opts: &FitOptions,
) -> Result<NodeFit> {
    let labels = data.schema().width();
    let model = with_hyper(start_model, hyper);
    let fit_stream = node_stream(data, view, data.start(), None, cut)?;
    let report = fit(&model, &fit_stream, opts, None)?;
    let counts = transition_counts(&report.model, &fit_stream, labels)?;
    let val_stream = node_stream(data, view, data.start(), Some(cut), data.horizon())?;
    let validation_ll = log_likelihood(&report.model, &val_stream)?;
    Ok(NodeFit { fit_ll: *report.train_ll.last().unwrap(), model: report.model, counts, validation_ll })
}

/// Pooled statistics of one round, per candidate.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub candidates: Vec<(f64, f64)>,
    /// `fits[node][candidate]`; `None` for skipped nodes.
    pub fits: Vec<Option<Vec<NodeFit>>>,
    pub counts: Vec<TransitionCounts>,
    pub fit_ll: Vec<f64>,
    pub validation_ll: Vec<f64>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::param(format!("worker pool: {e}")))
}

fn node_error(graph: &Graph, v: NodeId, e: Error) -> Error {
    Error::Node { node: graph.names()[v as usize].clone(), source: Box::new(e) }
}

/// Fits every node under every candidate in parallel and pools the results
/// in node order.
pub fn fit_round(
    graph: &Graph,
    data: &Dataset,
    views: &[NodeView],
    models: &[Option<ModelSpec>],
    hyper: &SharedHyperparams,
    config: &GraphFitConfig,
) -> Result<RoundResult> {
    let cut = data.start() + config.validation_split * data.duration();
    let candidates = config.candidates();
    let opts = FitOptions { max_iters: config.inner_iters, tol: 0.0 };
    let fits: Vec<Result<Option<Vec<NodeFit>>>> = pool(config.workers)?.install(|| {
        views
            .par_iter()
            .zip(models.par_iter())
            .map(|(view, model)| {
                let Some(model) = model else { return Ok(None) };
                candidates
                    .iter()
                    .map(|&(c, l)| {
                        let h = SharedHyperparams { magnitude: c, pooling: l, ..hyper.clone() };
                        fit_node(data, view, model, &h, cut, &opts)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
                    .map_err(|e| node_error(graph, view.node, e))
            })
            .collect()
    });
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let labels = data.schema().width();
    let mut counts = vec![TransitionCounts::zeros(labels); candidates.len()];
    let mut fit_ll = vec![0.0; candidates.len()];
    let mut validation_ll = vec![0.0; candidates.len()];
    for node in fits.iter().flatten() {
        for (k, f) in node.iter().enumerate() {
            counts[k].add(&f.counts);
            fit_ll[k] += f.fit_ll;
            validation_ll[k] += f.validation_ll;
        }
    }
    Ok(RoundResult { candidates, fits, counts, fit_ll, validation_ll })
}

/// Normalized rows of pooled counts; all-zero rows become uniform.
pub fn pooled_directions(counts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let l = counts.len();
    counts
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|c| c / total).collect()
            } else {
                log::warn!("no pooled transitions out of label {r}; using a uniform direction");
                vec![1.0 / l as f64; l]
            }
        })
        .collect()
}

/// Picks the candidate with the best pooled validation likelihood (earliest
/// on ties) and sets the directions from that candidate's pooled counts.
pub fn update_hyperparams(round: &RoundResult, previous: &SharedHyperparams) -> SharedHyperparams {
    let mut best = 0;
    for k in 1..round.candidates.len() {
        if round.validation_ll[k] > round.validation_ll[best] {
            best = k;
        }
    }
    let (c, l) = round.candidates[best];
    let largest = round.candidates.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
    if round.candidates.len() > 1 && c == largest && round.candidates.iter().any(|x| x.0 < c) {
        log::warn!("selected shrinkage magnitude {c} is the largest on the grid");
    }
    let counts = &round.counts[best];
    SharedHyperparams {
        same: pooled_directions(&counts.same),
        neighbor: if counts.neighbor.iter().flatten().any(|v| *v > 0.0) {
            pooled_directions(&counts.neighbor)
        } else {
            previous.neighbor.clone()
        },
        magnitude: c,
        pooling: l,
        round: previous.round + 1,
    }
}

/// One line of the round report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub magnitude: f64,
    pub pooling: f64,
    pub fit_ll: f64,
    pub validation_ll: f64,
    /// Pooled validation likelihood of every candidate.
    pub candidate_validation_ll: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GraphFit {
    pub rounds: Vec<RoundSummary>,
    pub hyper: SharedHyperparams,
    /// Final models on the full training window; `None` for nodes without
    /// events in the fitting part.
    pub models: Vec<Option<NeighborhoodModel>>,
    pub train_ll: f64,
    /// Global label marginal used as every node's baseline mark law.
    pub marginal: Vec<f64>,
}

/// Label frequencies over the whole dataset (uniform when empty).
pub fn label_marginal(data: &Dataset) -> Vec<f64> {
    let l = data.schema().width();
    let mut counts = vec![0.0; l];
    for e in data.events() {
        if let Some(k) = e.mark.label() {
            counts[k] += 1.0;
        }
    }
    let n: f64 = counts.iter().sum();
    if n == 0.0 {
        return vec![1.0 / l as f64; l];
    }
    counts.into_iter().map(|c| c / n).collect()
}

/// Rounds of per-node fitting with hyperparameter updates, then a final fit
/// of every node on the whole of `data`.
pub fn fit_graph(graph: &Graph, data: &Dataset, config: &GraphFitConfig) -> Result<GraphFit> {
    config.validate()?;
    if !matches!(data.schema(), MarkSchema::Composite { .. }) {
        return Err(Error::schema("graph fitting needs node-tagged marks"));
    }
    let views = build_neighborhoods(graph, data)?;
    let labels = data.schema().width();
    let marginal = label_marginal(data);
    let cut = data.start() + config.validation_split * data.duration();
    let mut hyper = SharedHyperparams::uniform(labels);
    hyper.magnitude = config.magnitudes[0];
    let fit_duration = cut - data.start();
    let mut models: Vec<Option<ModelSpec>> = views
        .iter()
        .map(|view| {
            let n = view.own.iter().filter(|&&i| data.events()[i].t <= cut).count();
            (n > 0).then(|| {
                initial_node_model(graph, view.node, config.variant, &marginal, &hyper, n, fit_duration, config.epsilon)
            })
        })
        .collect();
    let skipped = models.iter().filter(|m| m.is_none()).count();
    if skipped > 0 {
        log::info!("{skipped} nodes have no events to fit and are skipped");
    }

    let mut rounds = Vec::new();
    for _ in 0..config.rounds {
        let result = fit_round(graph, data, &views, &models, &hyper, config)?;
        let next = update_hyperparams(&result, &hyper);
        let best = result.candidates.iter().position(|&x| x == (next.magnitude, next.pooling)).unwrap();
        for (m, f) in models.iter_mut().zip(&result.fits) {
            if let Some(f) = f {
                *m = Some(f[best].model.clone());
            }
        }
        rounds.push(RoundSummary {
            round: next.round,
            magnitude: next.magnitude,
            pooling: next.pooling,
            fit_ll: result.fit_ll[best],
            validation_ll: result.validation_ll[best],
            candidate_validation_ll: result.validation_ll.clone(),
        });
        hyper = next;
    }

    let finals: Vec<Result<Option<(ModelSpec, f64)>>> = pool(config.workers)?.install(|| {
        views
            .par_iter()
            .zip(models.par_iter())
            .map(|(view, model)| {
                let Some(model) = model else { return Ok(None) };
                let stream = node_stream(data, view, data.start(), None, data.horizon())?;
                let r = fit(&with_hyper(model, &hyper), &stream, &config.polish, None)
                    .map_err(|e| node_error(graph, view.node, e))?;
                Ok(Some((r.model, *r.train_ll.last().unwrap())))
            })
            .collect()
    });
    let mut train_ll = 0.0;
    let mut out = Vec::with_capacity(views.len());
    for (view, f) in views.iter().zip(finals) {
        out.push(f?.map(|(model, ll)| {
            train_ll += ll;
            NeighborhoodModel { node: graph.names()[view.node as usize].clone(), variant: config.variant, model }
        }));
    }
    Ok(GraphFit { rounds, hyper, models: out, train_ll, marginal })
}

/// Log-likelihood of events after `cut`, with everything before as history,
/// summed over nodes that have a model.
pub fn held_out_log_likelihood(
    graph: &Graph,
    data: &Dataset,
    models: &[Option<NeighborhoodModel>],
    cut: f64,
) -> Result<f64> {
    let views = build_neighborhoods(graph, data)?;
    let mut total = 0.0;
    for (view, m) in views.iter().zip(models) {
        let Some(m) = m else { continue };
        let stream = node_stream(data, view, data.start(), Some(cut), data.horizon())?;
        total += log_likelihood(&m.model, &stream).map_err(|e| node_error(graph, view.node, e))?;
    }
    Ok(total)
}

/// Simulates the superposition of per-node models on `[0, horizon]`.
///
/// `models[v]` describes events on `v`; its components see events on `v`
/// and on `v`'s in-neighbors as parents, subject to their scopes. Baseline
/// marks and transitions act on labels; children land on the node whose
/// model spawned them.
pub fn simulate_graph(graph: &Graph, models: &[ModelSpec], types: usize, horizon: f64, seed: u64) -> Result<Simulation> {
    if models.len() != graph.len() {
        return Err(Error::param("one model per node is needed"));
    }
    let schema = MarkSchema::Composite { types, nodes: graph.names().to_vec() };
    for m in models {
        m.validate(&schema)?;
    }
    let mut rng = substream(seed, "simulate");
    let mut roots = Vec::new();
    for (v, m) in models.iter().enumerate() {
        for t in baseline_times(&m.baseline.rate, horizon, &mut rng) {
            let label = m.baseline.marks.sample(None, &mut rng).label().unwrap();
            roots.push(Draft { t, mark: Mark::Composite { label: label as u32, node: v as NodeId }, parent: None, gen: 0 });
        }
    }
    let drafts = grow(roots, horizon, DEFAULT_CAP, &mut rng, |p, rng, out| {
        let u = p.mark.node().unwrap();
        for w in std::iter::once(u).chain(graph.outgoing(u).iter().copied()) {
            for (c, comp) in models[w as usize].components.iter().enumerate() {
                if !comp.scope.admits(&p.mark) {
                    continue;
                }
                for _ in 0..poisson(comp.fertility.eval_unchecked(&p.mark), rng) {
                    let delay = comp.delay.sample(rng);
                    let label = comp.transition.sample(&p.mark, rng).label().unwrap();
                    out.push((delay, Mark::Composite { label: label as u32, node: w }, c));
                }
            }
        }
    })?;
    finish(drafts, horizon, schema)
}
