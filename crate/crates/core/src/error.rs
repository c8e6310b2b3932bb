use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("network architectures do not match")]
    ArchitectureMismatch,

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("driver {0} is not idle and cannot take an action")]
    DriverNotIdle(usize),

    #[error("idle driver {0} has no action")]
    MissingAction(usize),

    #[error("no agent entered grid {grid} at t={time}")]
    NoEntrants { grid: usize, time: usize },

    #[error("training failed at episode {episode}: {source}")]
    Training {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("objective evaluation failed at alpha={alpha}: {message}")]
    Evaluator { alpha: f64, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
