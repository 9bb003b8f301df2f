use thiserror::Error;

/// Errors raised across the crate.
///
/// Each variant maps onto one CLI exit class, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("training diverged at iteration {iteration}: loss {value:e}")]
    Divergence { iteration: usize, value: f64 },

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code: 2 validation, 3 numerical failure, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Validation(_)
            | Error::Capacity(_)
            | Error::MissingKey(_)
            | Error::UnknownKey(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Domain(_) | Error::NonFinite { .. } => 3,
            Error::Divergence { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
