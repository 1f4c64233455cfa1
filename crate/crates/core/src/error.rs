use thiserror::Error;

/// Errors raised across the editing engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition. `field` names the
    /// offending input so front ends can point at it.
    #[error("contract violation on `{field}`: {message}")]
    Contract { field: String, message: String },

    #[error("backend unavailable: {0}")]
    Unavailable(String),

    /// Guidance or sampling produced NaN/inf.
    #[error("non-finite values at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("cancelled at step {0}")]
    Cancelled(usize),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Contract {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Name of the offending field for contract errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Contract { field, .. } => Some(field),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
