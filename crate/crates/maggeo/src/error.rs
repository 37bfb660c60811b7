use thiserror::Error;

use crate::magnetic_flow::Trajectory;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integration failure at t = {t}: {message}")]
    IntegrationFailure {
        t: f64,
        message: String,
        partial: Box<Option<Trajectory>>,
    },
    #[error("no return to the section within horizon {horizon}")]
    NoReturn { horizon: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("degenerate orbit: Jacobian condition {condition:e}")]
    DegenerateOrbit { condition: f64 },
    #[error("uncertified index: certificate {certificate:e} below noise {noise:e}")]
    UncertifiedIndex { certificate: f64, noise: f64 },
    #[error("resolution too low: collocation condition {condition:e}")]
    ResolutionTooLow { condition: f64 },
    #[error("degenerate reduced zero: {0}")]
    DegenerateZero(String),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Unsupported(_) => 1,
            Error::Contract(_) | Error::InvariantViolation(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
