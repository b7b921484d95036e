//! Error taxonomy shared across the crate.
//!
//! The kinds map onto the CLI exit codes: configuration errors exit 2,
//! data errors exit 3, numeric errors exit 4, everything else 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, shape mismatches, bad flags.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or inconsistent data: malformed datasets, out-of-alphabet labels.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric-domain violations and non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Evaluation impossible (e.g. no class has a positive example).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// A malformed line in a line-oriented file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An internal invariant was violated; indicates a bug, not user error.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
