use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid posterior state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// An individual has zero likelihood at every support point.
    #[error("observation {row} has zero likelihood at every grid point")]
    DegenerateRow { row: usize },

    #[error("KKT system is singular or ill-conditioned (condition estimate {condition:e})")]
    DegenerateKkt { condition: f64 },

    /// A grid point sits on the boundary with a vanishing dual, so the argmax
    /// map is not differentiable there.
    #[error("strict complementarity fails at support point {index} (weight {weight:e}, dual {dual:e})")]
    BoundaryKink { index: usize, weight: f64, dual: f64 },

    #[error("optimization failed: {0}")]
    OptimizationFailure(String),

    #[error("no simulated path matches the conditioning choice history")]
    EmptyCell,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bisection failed to bracket the root: {0}")]
    Bracketing(String),

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
