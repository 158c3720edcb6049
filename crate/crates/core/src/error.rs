use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("context error: sequence length {len} exceeds context window {window}")]
    Context { len: usize, window: usize },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("realization error: {0}")]
    Realization(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint error: {what}: expected {expected}, found {found}")]
    Checkpoint {
        what: String,
        expected: String,
        found: String,
    },

    #[error("training aborted at step {step} (batch {batch}): {reason}")]
    TrainingAborted {
        step: usize,
        batch: u64,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Context { .. } => "context",
            Error::Capacity(_) => "capacity",
            Error::Realization(_) => "realization",
            Error::Data(_) => "data",
            Error::State(_) => "state",
            Error::Checkpoint { .. } => "checkpoint",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(
        what: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Checkpoint {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
