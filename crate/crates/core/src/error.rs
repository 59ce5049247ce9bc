use thiserror::Error;

use crate::model::Portfolio;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid problem: {}", .0.join("; "))]
    InvalidProblem(Vec<String>),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(
        "broker problem for portfolio {theta} is not well posed \
         (assumption margin {margin:.3e}, quadratic form not negative definite)"
    )]
    WellPosednessViolated { theta: Portfolio, margin: f64 },

    #[error("solver did not converge: residual {residual:.3e} above tolerance {tolerance:.3e}")]
    SolverDidNotConverge { residual: f64, tolerance: f64 },

    #[error("operation requires at least one client")]
    EmptyClientSet,

    #[error("exhaustive search over {n} agents exceeds the limit of {max}")]
    NTooLarge { n: usize, max: usize },

    #[error("parameter mismatch between runs: {0}")]
    ParameterMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidProblem(_) => "invalid_problem",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::WellPosednessViolated { .. } => "well_posedness_violated",
            Error::SolverDidNotConverge { .. } => "solver_did_not_converge",
            Error::EmptyClientSet => "empty_client_set",
            Error::NTooLarge { .. } => "n_too_large",
            Error::ParameterMismatch(_) => "parameter_mismatch",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
