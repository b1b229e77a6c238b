//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition (bad shape, bad
    /// range, wrong length).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The structure of an input is inconsistent (asymmetric admittance,
    /// isolated node, mismatched edge support).
    #[error("structural error: {0}")]
    Structural(String),

    /// A numerical procedure failed (non-finite value, solver divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file had an unrecognized or corrupt format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
