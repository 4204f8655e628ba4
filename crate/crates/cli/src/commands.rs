//! The subcommands. Each returns a short human-readable summary.

use std::path::{Path, PathBuf};

use cascades::engine::{fit, log_likelihood, EventStream, FitReport};
use cascades::event::{Dataset, IngestOptions, MarkSchema};
use cascades::graph::{fit_graph, Graph, GraphFit, Variant};
use cascades::sim::{simulate_with_cap, DEFAULT_CAP};
use cascades::transition::{log_ratio_rows, write_matrix_csv};
use clap::Args;
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::{write_atomic, CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// End of the simulated window.
    #[arg(long)]
    pub horizon: f64,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model to simulate (default: the first one listed).
    #[arg(long)]
    pub model: Option<String>,
    /// Abort once this many events have been generated.
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub cap: usize,
    /// Output directory for `events.jsonl` and `forest.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `model.json` and `trace.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    /// Overrides `em.max_iters`.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Overrides `em.tol`.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Fit on the first fraction of the window and trace held-out likelihood on the rest.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score only events after this fraction of the window, conditioning on the rest.
    #[arg(long)]
    pub split: Option<f64>,
    /// Output directory for `evaluate.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of the window used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output directory for `compare.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GraphFitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory for `rounds.csv`, `node_models.jsonl`,
    /// `transitions.csv` and `transitions_log_ratio.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

fn out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn load_data(cfg: &RunConfig, path: &Path, nodes: Option<Vec<String>>) -> Result<Dataset> {
    let opts = IngestOptions { schema: cfg.schema.clone(), nodes };
    Dataset::ingest(path, &opts).map_err(|e| match e {
        cascades::Error::Io(source) => CliError::io(path, source),
        other => other.into(),
    })
}

fn num(v: f64) -> String {
    v.to_string()
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let cfg = RunConfig::load(&args.config)?;
    let schema = cfg
        .schema
        .clone()
        .ok_or_else(|| CliError::Config("simulation needs a [schema] section".into()))?;
    let model = cfg.build(cfg.model(args.model.as_deref())?, None)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let sim = simulate_with_cap(&model, &schema, args.horizon, seed, args.cap)?;
    out_dir(&args.out)?;
    write_atomic(&args.out.join("events.jsonl"), |w| Ok(sim.dataset.write(w)?))?;
    write_atomic(&args.out.join("forest.jsonl"), |w| Ok(sim.forest.write(w)?))?;
    Ok(format!(
        "events {}, max generation {}, branching ratio {:.4}",
        sim.dataset.len(),
        sim.forest.max_generation(),
        sim.forest.branching_ratio()
    ))
}

fn write_trace(path: &Path, report: &FitReport) -> Result<()> {
    let names: Vec<&str> = report.model.components.iter().map(|c| c.name.as_str()).collect();
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["iteration".to_string(), "train_ll".into(), "objective".into(), "test_ll".into()];
        header.extend(names.iter().map(|n| format!("share_{n}")));
        header.extend(names.iter().map(|n| format!("delay_mean_{n}")));
        csv.write_record(&header)?;
        for i in 0..report.train_ll.len() {
            let mut row = vec![
                i.to_string(),
                num(report.train_ll[i]),
                num(report.objective[i]),
                report.test_ll.get(i).map(|v| num(*v)).unwrap_or_default(),
            ];
            row.extend(report.fertility_shares[i].iter().map(|v| num(*v)));
            row.extend(report.delay_means[i].iter().map(|v| num(*v)));
            csv.write_record(&row)?;
        }
        csv.flush().map_err(|e| CliError::io(path, e))?;
        Ok(())
    })
}

pub fn cmd_fit(args: &FitArgs) -> Result<String> {
    let cfg = RunConfig::load(&args.config)?;
    let data = load_data(&cfg, &args.data, None)?;
    let mut opts = cfg.em.options();
    opts.max_iters = args.iters.unwrap_or(opts.max_iters);
    opts.tol = args.tol.unwrap_or(opts.tol);
    let (train, test) = match args.split {
        Some(f) => {
            let (train, test) = data.split(f)?;
            let stream = EventStream::conditioned(&train, &test)?;
            (train, Some(stream))
        }
        None => (data, None),
    };
    let model = cfg.build(cfg.model(args.model.as_deref())?, Some(&train))?;
    let report = fit(&model, &EventStream::from(&train), &opts, test.as_ref())?;
    out_dir(&args.out)?;
    write_atomic(&args.out.join("model.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report.model).map_err(cascades::Error::from)?;
        writeln!(w).map_err(|e| CliError::io(&args.out, e))
    })?;
    write_trace(&args.out.join("trace.csv"), &report)?;
    let mut msg = format!(
        "train LL {} after {} iterations{}",
        report.train_ll.last().unwrap(),
        report.iterations,
        if report.converged { " (converged)" } else { "" }
    );
    if let Some(t) = report.test_ll.last() {
        msg.push_str(&format!(", test LL {t}"));
    }
    Ok(msg)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String> {
    let cfg = RunConfig::load(&args.config)?;
    let data = load_data(&cfg, &args.data, None)?;
    let stream = match args.split {
        Some(f) => {
            let (train, test) = data.split(f)?;
            EventStream::conditioned(&train, &test)?
        }
        None => EventStream::from(&data),
    };
    if cfg.models.is_empty() {
        return Err(CliError::Config("config lists no models".into()));
    }
    let mut rows = Vec::new();
    for entry in &cfg.models {
        let model = cfg.build(entry, Some(&data))?;
        rows.push((entry.name.clone(), log_likelihood(&model, &stream)?));
    }
    if let Some(out) = &args.out {
        out_dir(out)?;
        write_atomic(&out.join("evaluate.csv"), |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["model", "log_likelihood", "events"])?;
            for (name, ll) in &rows {
                csv.write_record([name.clone(), num(*ll), stream.scored_count().to_string()])?;
            }
            csv.flush().map_err(|e| CliError::io(out, e))?;
            Ok(())
        })?;
    }
    Ok(rows.iter().map(|(n, ll)| format!("{n}: {ll}")).collect::<Vec<_>>().join("\n"))
}

/// Outcome of one model in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum CompareRow {
    Fitted { train_ll: f64, test_ll: f64 },
    Failed(String),
}

pub fn cmd_compare(args: &CompareArgs) -> Result<String> {
    let cfg = RunConfig::load(&args.config)?;
    if cfg.models.len() < 2 {
        return Err(CliError::Config("compare needs at least two models".into()));
    }
    let data = load_data(&cfg, &args.data, None)?;
    let (train, test) = data.split(args.split)?;
    let train_stream = EventStream::from(&train);
    let test_stream = EventStream::conditioned(&train, &test)?;
    let mut opts = cfg.em.options();
    opts.max_iters = args.iters.unwrap_or(opts.max_iters);
    opts.tol = args.tol.unwrap_or(opts.tol);

    let rows: Vec<CompareRow> = cfg
        .models
        .par_iter()
        .map(|entry| {
            let run = || -> Result<CompareRow> {
                let model = cfg.build(entry, Some(&train))?;
                let report = fit(&model, &train_stream, &opts, None)?;
                let test_ll = log_likelihood(&report.model, &test_stream)?;
                Ok(CompareRow::Fitted { train_ll: *report.train_ll.last().unwrap(), test_ll })
            };
            run().unwrap_or_else(|e| {
                log::warn!("model `{}` failed: {e}", entry.name);
                CompareRow::Failed(e.to_string())
            })
        })
        .collect();

    out_dir(&args.out)?;
    write_atomic(&args.out.join("compare.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["model", "train_ll", "test_ll"])?;
        for (entry, row) in cfg.models.iter().zip(&rows) {
            match row {
                CompareRow::Fitted { train_ll, test_ll } => {
                    csv.write_record([entry.name.clone(), num(*train_ll), num(*test_ll)])?
                }
                CompareRow::Failed(_) => csv.write_record([entry.name.as_str(), "failed", "failed"])?,
            }
        }
        csv.flush().map_err(|e| CliError::io(&args.out, e))?;
        Ok(())
    })?;
    Ok(cfg
        .models
        .iter()
        .zip(&rows)
        .map(|(e, r)| match r {
            CompareRow::Fitted { train_ll, test_ll } => format!("{}: train {train_ll}, test {test_ll}", e.name),
            CompareRow::Failed(msg) => format!("{}: failed ({msg})", e.name),
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

fn write_graph_outputs(out: &Path, graph: &Graph, schema: &MarkSchema, fit: &GraphFit, candidates: &[(f64, f64)]) -> Result<()> {
    let per_neighbor = fit.models.iter().flatten().any(|m| m.variant == Variant::PerNeighborIntensity);
    write_atomic(&out.join("rounds.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header: Vec<String> =
            ["round", "magnitude", "pooling", "fit_ll", "validation_ll"].iter().map(|s| s.to_string()).collect();
        header.extend(candidates.iter().map(|(c, l)| {
            if per_neighbor {
                format!("validation_ll_c{c}_pool{l}")
            } else {
                format!("validation_ll_c{c}")
            }
        }));
        csv.write_record(&header)?;
        for r in &fit.rounds {
            let mut row =
                vec![r.round.to_string(), num(r.magnitude), num(r.pooling), num(r.fit_ll), num(r.validation_ll)];
            row.extend(r.candidate_validation_ll.iter().map(|v| num(*v)));
            csv.write_record(&row)?;
        }
        csv.flush().map_err(|e| CliError::io(out, e))?;
        Ok(())
    })?;

    write_atomic(&out.join("node_models.jsonl"), |w| {
        for (name, m) in graph.names().iter().zip(&fit.models) {
            let line = match m {
                Some(m) => json!({ "node": name, "variant": m.variant, "model": m.model }),
                None => json!({ "node": name, "skipped": true }),
            };
            writeln!(w, "{line}").map_err(|e| CliError::io(out, e))?;
        }
        Ok(())
    })?;

    let labels: Vec<String> = (0..schema.width()).map(|k| k.to_string()).collect();
    let mut rows: Vec<(String, Vec<f64>)> =
        fit.hyper.same.iter().enumerate().map(|(k, r)| (format!("same/{k}"), r.clone())).collect();
    if fit.models.iter().flatten().any(|m| {
        matches!(m.variant, Variant::SeparateNeighborTransitions | Variant::PerNeighborIntensity)
    }) {
        rows.extend(fit.hyper.neighbor.iter().enumerate().map(|(k, r)| (format!("neighbor/{k}"), r.clone())));
    }
    for (file, rows) in [("transitions.csv", rows.clone()), ("transitions_log_ratio.csv", log_ratio_rows(&rows, &fit.marginal))] {
        let path = out.join(file);
        write_atomic(&path, |w| write_matrix_csv(w, &labels, &rows).map_err(|e| CliError::io(&path, e)))?;
    }
    Ok(())
}

pub fn cmd_graph_fit(args: &GraphFitArgs) -> Result<String> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("", Path::new("."))?,
    };
    let graph = Graph::load(&args.graph).map_err(|e| match e {
        cascades::Error::Io(source) => CliError::io(&args.graph, source),
        other => other.into(),
    })?;
    let data = load_data(&cfg, &args.data, Some(graph.names().to_vec()))?;
    let mut config = cfg.graph_config();
    config.rounds = args.rounds.unwrap_or(config.rounds);
    config.variant = args.variant.unwrap_or(config.variant);
    config.workers = args.workers.unwrap_or(config.workers);
    let result = fit_graph(&graph, &data, &config)?;
    out_dir(&args.out)?;
    write_graph_outputs(&args.out, &graph, data.schema(), &result, &config.candidates())?;
    let fitted = result.models.iter().flatten().count();
    Ok(format!(
        "{} rounds, {fitted}/{} nodes fitted, magnitude {}, train LL {}",
        result.rounds.len(),
        graph.len(),
        result.hyper.magnitude,
        result.train_ll
    ))
}
