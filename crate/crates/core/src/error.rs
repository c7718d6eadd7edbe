use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuinError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{what} = {value} lies outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    NoSignChange {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("Poisson right-hand side is not centered: mean = {mean:e}")]
    CenteringViolated { mean: f64 },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("inconsistent grid: {0}")]
    Grid(String),

    #[error("linear solver failure: {0}")]
    LinearSolve(String),

    #[error("missing input: {0}")]
    MissingInput(String),
}

pub type Result<T> = std::result::Result<T, RuinError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> RuinError {
    RuinError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
