//! Crate-wide error type.
//!
//! Errors carry a coarse classification that the CLI maps onto exit codes:
//! validation problems (bad arguments, inconsistent shapes, malformed
//! manifests) exit 2, data problems (unreadable or unsupported files) exit 3,
//! numerical failures exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent inputs: shape mismatches, invalid configuration,
    /// manifest violations.
    #[error("validation: {0}")]
    Validation(String),

    /// Unreadable, unsupported or malformed data files.
    #[error("data: {0}")]
    Data(String),

    /// A numerical computation failed (non-finite value, degenerate input).
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
