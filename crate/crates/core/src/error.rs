use thiserror::Error;

/// Errors raised by the model, solver and closed-loop engines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// No index in `1..=m` satisfies the descent inequality within tolerance.
    #[error("no descent index found (best margin {best_margin:e})")]
    DescentNotFound { best_margin: f64 },

    #[error("objective or constraints not finite at the starting point: {0}")]
    InvalidStart(String),

    #[error("non-finite function value while differencing component {component}")]
    NonFiniteSample { component: usize },

    #[error("optimization instance at k={k} returned status {status}")]
    SolverFailed { k: usize, status: String },

    #[error("csv: {0}")]
    Csv(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
