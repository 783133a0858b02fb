use thiserror::Error;

/// Errors raised by the imaging toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}): {context}")]
    NotPositive { context: String, min_eigenvalue: f64 },

    #[error("matrix is not Hermitian (deviation {deviation:e}): {context}")]
    NotHermitian { context: String, deviation: f64 },

    #[error("perturbative regime violated: {0}")]
    Perturbative(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by bad inputs rather than numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::NotPositive { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
