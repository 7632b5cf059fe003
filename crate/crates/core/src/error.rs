use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmvError {
    /// A parameter violated the precondition of the operation that received it.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Adaptive quadrature exhausted its subdivision budget.
    #[error("quadrature did not converge after {panels} panels (error estimate {error:.3e}, target {target:.3e})")]
    QuadratureDiverged {
        panels: usize,
        error: f64,
        target: f64,
    },

    /// A quantity that must stay finite became NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// An iterative algorithm produced a non-finite state.
    #[error("diverged at iteration {iteration}: {context} became non-finite")]
    Diverged { iteration: usize, context: &'static str },

    /// The operation does not support the requested channel setting.
    #[error("unsupported setting: {0}")]
    Unsupported(String),

    /// A bracketing or classification assumption was violated.
    #[error("anomaly: {0}")]
    Anomaly(String),

    /// Binary ensemble dump could not be decoded.
    #[error("malformed ensemble dump: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, MmvError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> MmvError {
    MmvError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
