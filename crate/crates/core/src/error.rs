use thiserror::Error;

use crate::maxent::MaxEntSolution;

/// Errors raised by the model, solvers and experiment plumbing.
#[derive(Debug, Error)]
pub enum IrlError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// The exponentiated-gradient solver hit its iteration cap. The best
    /// iterate found is carried so callers can still act on it.
    #[error("max-entropy solver hit iteration cap (gradient residual {residual:.3e})")]
    NotConverged {
        residual: f64,
        best: Box<MaxEntSolution>,
    },

    #[error("hidden gap at steps {start}..={end} has length {len} > enumeration cap {cap}; sample it instead")]
    GapTooLong {
        start: usize,
        end: usize,
        len: usize,
        cap: usize,
    },

    #[error("no feasible completion for hidden steps {start}..={end}")]
    Infeasible { start: usize, end: usize },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = IrlError> = std::result::Result<T, E>;
