use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("nothing to score")]
    NothingToScore,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("query oracle failed at query {query_idx} ({completed} responses completed): {message}")]
    OracleFailure {
        query_idx: usize,
        completed: usize,
        message: String,
    },

    #[error("malformed csv: {0}")]
    MalformedCsv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
