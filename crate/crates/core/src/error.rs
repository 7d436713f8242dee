use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("manifest error in `{field}`: {reason}")]
    Manifest { field: String, reason: String },

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse manifest: {0}")]
    Json(#[from] serde_json::Error),

    #[error("sinkhorn kernel produced non-finite values (eps = {reg:e}); use a larger regularization or the log-domain solver")]
    NumericalInstability { reg: f64 },

    #[error("memory budget overflow: long-term memory holds {long} samples but the budget is {budget}")]
    BudgetOverflow { long: usize, budget: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{0}")]
    Degenerate(String),

    #[error("manager has been closed")]
    Closed,
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
