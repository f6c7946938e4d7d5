//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("attention needs at least one incoming message")]
    NoIncomingMessages,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("action {action} out of range for {n_agents} agents")]
    ActionOutOfRange { action: usize, n_agents: usize },

    #[error("batch contains no episodes")]
    EmptyBatch,

    #[error("metric history is empty")]
    EmptyHistory,

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }
}
