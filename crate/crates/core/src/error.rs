use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (learning rate {learning_rate}): {reason}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
        reason: String,
    },

    #[error("rejection sampling for voxel {voxel}: acceptance {accepted_fraction:.4} after {attempted} draws")]
    LowAcceptance {
        voxel: String,
        accepted_fraction: f64,
        attempted: usize,
    },

    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure during computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::MalformedLine { .. }
                | Error::Validation(_)
                | Error::Dimension { .. }
                | Error::Config(_)
                | Error::Format(_)
                | Error::Io { .. }
                | Error::InsufficientSamples { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
