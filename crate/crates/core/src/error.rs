use thiserror::Error;

/// Errors raised by model evaluation, inference and the evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("fitting failed: {0}")]
    Fitting(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value out of domain: {0}")]
    OutOfDomain(String),

    #[error("degenerate galaxy shape: {0}")]
    DegenerateShape(String),

    #[error("zero rate at pixel (row {row}, col {col}) with {count} observed photons")]
    ZeroRate { row: usize, col: usize, count: u32 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("log density is not finite at the initial point")]
    NonFiniteLogDensity,

    #[error("annealing weight increment is not finite at step {step}")]
    NonFiniteWeight { step: usize },

    #[error("classification failed: {0}")]
    Classification(String),

    #[error("render failed: {0}")]
    Render(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("sequence is constant; effective sample size undefined")]
    ConstantSequence,

    #[error("scoring failed: {0}")]
    Scoring(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
