use thiserror::Error;

/// Errors raised anywhere in model construction, fitting and evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid basis specification: {0}")]
    InvalidSpec(String),

    #[error("point {value} lies outside the basis domain [{lower}, {upper}]")]
    Domain { value: f64, lower: f64, upper: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model specification error: {0}")]
    Specification(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("penalized IRLS did not converge within {iterations} iterations (last relative change {last_change:.3e})")]
    Convergence {
        iterations: usize,
        last_change: f64,
        /// Last coefficient iterate.
        theta: Vec<f64>,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("generator error: {0}")]
    Generator(String),
}

pub type Result<T> = std::result::Result<T, Error>;
