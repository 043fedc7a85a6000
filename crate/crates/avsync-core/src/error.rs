//! Error type shared by all core modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid input: shape mismatches, out-of-range arguments, bad specs.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A numerical abort: non-finite values encountered mid-computation.
    /// Carries enough context (step / block index) to locate the blow-up.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// A named component (separator, generator) is missing from a registry.
    #[error("unknown component: {0}")]
    UnknownComponent(String),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}
