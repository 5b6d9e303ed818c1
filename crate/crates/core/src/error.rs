use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{what} outside its domain: {detail}")]
    Domain { what: &'static str, detail: String },

    #[error("teacher training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("invalid segment: start {start} must precede end {end}")]
    InvalidSegment { start: f64, end: f64 },

    #[error("degenerate segment: endpoints coincide (|theta_s - theta_e| = {gap:e})")]
    DegenerateSegment { gap: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that stem from floating-point breakdown rather than
    /// bad input; the CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::TrainingDiverged { .. } | Error::DegenerateSegment { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimError { expected, got });
    }
    Ok(())
}
