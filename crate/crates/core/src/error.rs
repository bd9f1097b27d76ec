use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    /// Standard deviation below the standardization floor.
    #[error("degenerate logits: std {std:e} is below the minimum {min_std:e}")]
    DegenerateLogits { std: f64, min_std: f64 },

    #[error("infinite divergence: p[{index}] > 0 but q[{index}] = 0")]
    InfiniteDivergence { index: usize },

    #[error("unattainable constraint: target {target} must lie strictly inside ({min}, {max})")]
    UnattainableConstraint { target: f64, min: f64, max: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    /// Optimizer ran out of iterations; `last` holds the final iterate.
    #[error("no convergence after {iterations} iterations (gradient inf-norm {grad_norm:e})")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    CheckpointVersion { found: i64, expected: i64 },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
