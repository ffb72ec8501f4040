use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no closed form for {0}; use volterra::invert_memory")]
    NoClosedForm(String),

    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("singular matrix")]
    Singular,

    #[error("cannot sample: {0}")]
    Unsamplable(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
