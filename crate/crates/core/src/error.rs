use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("letter index {index} out of range (have {available})")]
    IndexOutOfRange { index: usize, available: usize },

    #[error("invalid field '{field}': {msg}")]
    Field { field: String, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("degenerate Monte Carlo average (ess {ess:.2}, log-weight spread {spread:.1} nats); {advice}")]
    Degenerate { ess: f64, spread: f64, advice: String },

    #[error("state norm {norm:.3e} exceeded threshold at t = {time}")]
    Explosion { time: f64, norm: f64 },

    #[error("Picard iteration is not contracting (measured ratio {ratio:.3})")]
    NonContraction { ratio: f64 },

    #[error("MALA acceptance collapsed to {rate:.3}; reduce the initial step size or lengthen burn-in")]
    AcceptanceCollapse { rate: f64 },

    #[error("insufficient range: {0}")]
    InsufficientRange(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
