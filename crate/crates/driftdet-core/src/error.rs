use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants map onto process exit codes: configuration errors exit 2,
/// data errors exit 3, internal invariant violations exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error: cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("coverage undefined: oracle mAP equals baseline mAP ({0})")]
    UndefinedCoverage(f64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::UnreadableFile { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Internal(_) => 4,
            Error::UndefinedCoverage(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
