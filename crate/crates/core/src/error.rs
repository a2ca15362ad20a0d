use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid occupancy measure: {condition}")]
    InvalidOccupancy { condition: String },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("polytope is infeasible (primal residual {residual:.3e})")]
    Infeasible { residual: f64 },

    #[error("projection did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("adversarial schedule exhausted at episode {t} (length {len})")]
    ScheduleExhausted { t: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("at least {needed} checkpoints required, got {got}")]
    TooFewCheckpoints { needed: usize, got: usize },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
