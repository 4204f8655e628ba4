//! Error type shared by every module of the crate.

use thiserror::Error;

/// Broad category of a failure, used by drivers to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid model or run configuration.
    Config,
    /// Unreadable, malformed or inconsistent input data.
    Data,
    /// The numerics broke down (zero intensity, unbounded likelihood, runaway cascade).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: timestamp {t} is outside [0, {horizon}]")]
    Timestamp { line: usize, t: f64, horizon: f64 },

    #[error("line {line}: feature index {index} out of range for width {width}")]
    FeatureIndex { line: usize, index: usize, width: usize },

    #[error("line {line}: label {label} out of range for {count} labels")]
    LabelIndex { line: usize, label: usize, count: usize },

    #[error("unknown node `{node}`{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    UnknownNode { node: String, line: Option<usize> },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("total weight is zero in {0}")]
    ZeroWeight(&'static str),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("zero exposure with positive credit for {0}")]
    ZeroExposure(String),

    #[error("likelihood unbounded in coordinate {0}: zero denominator with positive credit")]
    Unbounded(usize),

    #[error("intensity is zero at event {event} (t = {t})")]
    ZeroIntensity { event: usize, t: f64 },

    #[error("objective decreased at iteration {iteration}: {before} -> {after}")]
    LikelihoodDecrease { iteration: usize, before: f64, after: f64 },

    #[error("event cap {cap} exceeded (empirical branching ratio {branching:.3}); model is likely supercritical")]
    CapExceeded { cap: usize, branching: f64 },

    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::Timestamp { .. }
            | Error::FeatureIndex { .. }
            | Error::LabelIndex { .. }
            | Error::UnknownNode { .. }
            | Error::Schema(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::InvalidParameter(_) => ErrorKind::Config,
            Error::ZeroWeight(_)
            | Error::Degenerate(_)
            | Error::ZeroExposure(_)
            | Error::Unbounded(_)
            | Error::ZeroIntensity { .. }
            | Error::LikelihoodDecrease { .. }
            | Error::CapExceeded { .. } => ErrorKind::Numerical,
            Error::Node { source, .. } => source.kind(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
