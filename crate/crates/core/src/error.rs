use thiserror::Error;

/// Errors raised by the solvers, samplers and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} outside range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    /// A correctness-critical step-size condition failed.
    #[error("step-size precondition violated: {condition} = {value:.6e} exceeds {bound:.6e}")]
    Precondition {
        condition: String,
        value: f64,
        bound: f64,
    },

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("fixed-point iteration diverging at iteration {iteration} (displacement {displacement:.3e})")]
    Divergence { iteration: usize, displacement: f64 },

    #[error("matrix is singular or rank deficient (smallest eigenvalue estimate {0:.3e})")]
    Singular(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Whether the error is a precondition failure rather than a numeric one.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::Precondition { .. } | Error::InvalidArgument(_) | Error::OutOfRange { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
