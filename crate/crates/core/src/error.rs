use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::ParamStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical instability in {op} at index {index}")]
    NumericalInstability { op: &'static str, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("{path}: row {row}, column {column}: {reason}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        /// Parameters after the last finite update.
        last_good: Box<ParamStore>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
