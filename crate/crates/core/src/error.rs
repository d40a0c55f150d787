use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented invariant.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("study `{0}` has no observed events")]
    NoEvents(String),

    #[error("statistic undefined: {0}")]
    UndefinedStatistic(String),

    /// An inner optimizer hit its iteration cap. The last iterate is kept so
    /// callers can decide whether it is usable.
    #[error("solver stalled after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    SolverStall {
        iterations: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
