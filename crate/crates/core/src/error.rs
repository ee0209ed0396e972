use thiserror::Error;

/// Errors raised anywhere in the decoding and training stack.
#[derive(Debug, Error)]
pub enum RsdError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("encoding budget exhausted ({used}/{budget} calls spent)")]
    BudgetExceeded { budget: usize, used: usize },

    #[error("no trace entry for query {query_id} with ranking {ranking:?}")]
    MissingTraceEntry { query_id: String, ranking: Vec<usize> },

    #[error("oracle request timed out: {0}")]
    HttpTimeout(String),

    #[error("malformed oracle response: {0}")]
    MalformedResponse(String),

    #[error("history of {rounds} rounds exceeds policy capacity of {capacity}")]
    Capacity { rounds: usize, capacity: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RsdError> = std::result::Result<T, E>;
