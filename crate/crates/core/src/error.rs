use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("action {action} outside admissible range [{lower}, 0]")]
    ActionOutOfRange { action: f64, lower: f64 },

    #[error("cannot step a terminal state (step index {0})")]
    TerminalState(usize),

    #[error("singular matrix: pivot {pivot} at index {index} is below tolerance")]
    Singular { index: usize, pivot: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("replay memory holds {have} records, sampling needs at least {need}")]
    InsufficientMemory { have: usize, need: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
