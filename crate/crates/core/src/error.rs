use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied field failed validation. `field` is a dotted path.
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("context {context} out of range (n_contexts = {n_contexts})")]
    ContextOutOfRange { context: usize, n_contexts: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A probability ratio p/q is undefined because q vanishes where it is needed.
    #[error("undefined ratio at item {item}: q = 0 where p = {p}")]
    UndefinedRatio { item: usize, p: f64 },

    #[error("divergence during {phase} at epoch {epoch}: {detail}")]
    Divergence {
        phase: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("optimizer did not converge after {iterations} iterations (grad inf-norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("schema mismatch in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 1 for validation problems, 2 for
    /// runtime divergence or non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NotConverged { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
