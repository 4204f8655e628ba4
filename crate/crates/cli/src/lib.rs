//! Command implementations behind the `cascades` binary.
//!
//! Every command reads its inputs completely before writing anything, and
//! every output file is written to a temporary file in the target directory
//! and renamed into place.

pub mod commands;
pub mod config;

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cascades::ErrorKind;
use thiserror::Error;

pub use commands::*;
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cascades::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for configuration errors, 3 for data and i/o errors, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
            CliError::Io { .. } | CliError::Csv(_) => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Writes `path` through a temporary sibling file that is renamed over it
/// once `body` succeeds.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    let mut w = BufWriter::new(tmp);
    body(&mut w)?;
    let tmp = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_body_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        let r = write_atomic(&path, |w| {
            writeln!(w, "partial").map_err(|e| CliError::io(Path::new("x"), e))?;
            Err(CliError::Config("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let cap = cascades::Error::CapExceeded { cap: 10, branching: 1.2 };
        assert_eq!(CliError::from(cap).exit_code(), 4);
        let parse = cascades::Error::Parse { line: 3, message: "bad".into() };
        assert_eq!(CliError::from(parse).exit_code(), 3);
    }
}
