//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [schema]                 # needed by `simulate`; data files may declare their own
//! kind = "labels"
//! count = 3
//!
//! [em]
//! max_iters = 100
//! tol = 1e-6
//! epsilon = 1e-6           # optional, overrides every model's truncation mass
//! normalize = false        # optional
//!
//! [[models]]
//! name = "flat"
//! preset = "baseline"
//!
//! [[models]]
//! name = "k5"
//! preset = "k5"
//! periodic = true
//! period = 24.0
//! buckets = 24
//! delay = "gamma"
//!
//! [[models]]
//! name = "custom"
//! spec_file = "custom.json"   # relative to the config file
//!
//! [graph]
//! variant = "shared_neighbor_transition"
//! rounds = 3
//! workers = 4
//! ```
//!
//! A model may also be given inline as a `spec` table in the same shape as
//! the JSON model files.

use std::path::{Path, PathBuf};

use cascades::engine::presets::{preset, DelayFamily, PresetOptions};
use cascades::engine::{FitOptions, ModelSpec};
use cascades::event::{Dataset, MarkSchema};
use cascades::graph::{GraphFitConfig, Variant};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schema: Option<MarkSchema>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub graph: GraphSection,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmConfig {
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub normalize: Option<bool>,
}

fn default_iters() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-6
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: default_iters(), tol: default_tol(), epsilon: None, normalize: None }
    }
}

impl EmConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions { max_iters: self.max_iters, tol: self.tol }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    #[serde(default)]
    pub spec_file: Option<PathBuf>,
    #[serde(default)]
    pub periodic: bool,
    #[serde(default)]
    pub period: Option<f64>,
    #[serde(default)]
    pub buckets: Option<usize>,
    #[serde(default)]
    pub delay: Option<DelayFamily>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub variant: Option<Variant>,
    pub rounds: Option<usize>,
    pub inner_iters: Option<usize>,
    pub workers: Option<usize>,
    pub magnitudes: Option<Vec<f64>>,
    pub poolings: Option<Vec<f64>>,
    pub validation_split: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    fn check(&self) -> Result<(), CliError> {
        if !(self.em.tol >= 0.0) {
            return Err(CliError::Config("em.tol must be nonnegative".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.models {
            let sources = m.preset.is_some() as u8 + m.spec.is_some() as u8 + m.spec_file.is_some() as u8;
            if sources != 1 {
                return Err(CliError::Config(format!(
                    "model `{}` needs exactly one of `preset`, `spec` or `spec_file`",
                    m.name
                )));
            }
            if !seen.insert(m.name.as_str()) {
                log::warn!("model name `{}` appears more than once", m.name);
            }
        }
        Ok(())
    }

    pub fn model(&self, name: Option<&str>) -> Result<&ModelEntry, CliError> {
        match name {
            Some(n) => self
                .models
                .iter()
                .find(|m| m.name == n)
                .ok_or_else(|| CliError::Config(format!("no model named `{n}`"))),
            None => self.models.first().ok_or_else(|| CliError::Config("config lists no models".into())),
        }
    }

    /// Builds the starting model of `entry`; presets derive their initial
    /// values from `data`.
    pub fn build(&self, entry: &ModelEntry, data: Option<&Dataset>) -> Result<ModelSpec, CliError> {
        let mut spec = if let Some(name) = &entry.preset {
            let data = data.ok_or_else(|| {
                CliError::Config(format!("model `{}` is a preset and needs data to initialize", entry.name))
            })?;
            let defaults = PresetOptions::default();
            let opts = PresetOptions {
                period: entry.period.unwrap_or(defaults.period),
                buckets: entry.buckets.unwrap_or(defaults.buckets),
                periodic: entry.periodic,
                delay: entry.delay.unwrap_or_default(),
            };
            preset(name, data, &opts)?
        } else if let Some(spec) = &entry.spec {
            spec.clone()
        } else {
            let path = self.base_dir.join(entry.spec_file.as_ref().unwrap());
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(eps) = self.em.epsilon {
            spec.epsilon = eps;
        }
        if let Some(n) = self.em.normalize {
            spec.normalize = n;
        }
        Ok(spec)
    }

    pub fn graph_config(&self) -> GraphFitConfig {
        let d = GraphFitConfig::default();
        let g = &self.graph;
        GraphFitConfig {
            variant: g.variant.unwrap_or(d.variant),
            rounds: g.rounds.unwrap_or(d.rounds),
            inner_iters: g.inner_iters.unwrap_or(d.inner_iters),
            polish: self.em.options(),
            validation_split: g.validation_split.unwrap_or(d.validation_split),
            magnitudes: g.magnitudes.clone().unwrap_or(d.magnitudes),
            poolings: g.poolings.clone().unwrap_or(d.poolings),
            workers: g.workers.unwrap_or(d.workers),
            epsilon: self.em.epsilon.unwrap_or(d.epsilon),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nsede = 2\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = RunConfig::parse("[em]\nmax_iter = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn model_needs_one_source() {
        let err = RunConfig::parse("[[models]]\nname = \"a\"\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn inline_spec_parses() {
        let text = r#"
            [schema]
            kind = "labels"
            count = 2

            [[models]]
            name = "flat"
            [models.spec.baseline]
            rate = { kind = "homogeneous", rate = 0.5 }
            marks = { kind = "categorical", probs = [0.5, 0.5] }
        "#;
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        let spec = cfg.build(cfg.model(None).unwrap(), None).unwrap();
        assert!(spec.components.is_empty());
        assert_eq!(cfg.em.max_iters, 100);
    }

    #[test]
    fn graph_section_overrides_defaults() {
        let cfg = RunConfig::parse("[graph]\nrounds = 5\nvariant = \"no_neighbors\"\n", Path::new(".")).unwrap();
        let g = cfg.graph_config();
        assert_eq!(g.rounds, 5);
        assert_eq!(g.variant, Variant::NoNeighbors);
    }
}
