use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::{FaceId, IdentityId};

pub type Result<T> = std::result::Result<T, CurateError>;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    /// A row cannot be normalized because its L2 norm is zero.
    #[error("ingest error: embedding row {row} has zero norm")]
    ZeroVector { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate center: members of identity {0} average to the zero vector")]
    DegenerateCenter(IdentityId),

    #[error("unknown face id {0}")]
    UnknownFace(FaceId),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("insufficient impostor scores: {available} available, FMR {target_fmr} needs at least {required}")]
    InsufficientPairs {
        available: usize,
        required: usize,
        target_fmr: f64,
    },

    #[error("SER undefined: lowest group error is zero ({group})")]
    SerUndefined { group: String },

    #[error("matcher failure: {0}")]
    Matcher(String),

    #[error("embedding provider failed at iteration {iteration}: {source}")]
    Provider {
        iteration: usize,
        #[source]
        source: Box<CurateError>,
    },
}

impl CurateError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CurateError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        CurateError::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input data rather than a bug or a
    /// failing external process.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, CurateError::Matcher(_))
    }
}
