use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: String, detail: String },

    #[error("empty input sequence for {0}")]
    EmptySequence(&'static str),

    #[error("index {index} out of range for {what} with {len} rows")]
    Index { what: String, index: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("context {id} is not active (K = {k})")]
    Context { id: usize, k: usize },

    #[error("episode already complete at t = {0}")]
    EpisodeComplete(usize),

    #[error("enumeration would produce {count} trajectories (cap {cap})")]
    Capacity { count: u128, cap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch misaligned: {0}")]
    Batch(String),

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("numerical failure at epoch {epoch}: {detail}")]
    Numerical { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
