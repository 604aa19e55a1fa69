use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: `Usage` exits 1, `Numerical`
/// exits 3, everything else (bad input, bad data, bad state) exits 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error for `{field}`: {message}")]
    Config { field: String, message: String },

    /// A caller broke an operation's precondition (mismatched vocabularies,
    /// empty batch, missing required field).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("generation error: {0}")]
    Generation(String),

    /// NaN/Inf during training. Carries the path of the state dump when one
    /// was written.
    #[error("numerical abort: {message}")]
    Numerical {
        message: String,
        dump: Option<PathBuf>,
    },

    #[error("build error: {0}")]
    Build(String),

    /// An enumeration bound would be exceeded (e.g. exact sequence KL on an
    /// instance too large to enumerate).
    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 0 success, 1 usage, 2 input/data error,
    /// 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}
