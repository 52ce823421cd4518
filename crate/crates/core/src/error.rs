use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition or configuration check failed.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sidecar is missing required key \"{0}\"")]
    MissingKey(String),

    #[error("sidecar has unknown key \"{0}\"")]
    UnknownKey(String),

    #[error("\"{key}\" must have {expected} elements, found {found}")]
    Length { key: String, expected: usize, found: usize },

    #[error("\"{0}\" contains a non-finite value")]
    NonFinite(String),

    #[error("malformed json in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("png error on {path}: {msg}")]
    Png { path: PathBuf, msg: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end: 2 for validation
    /// failures, 3 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Png { .. } => 3,
            _ => 2,
        }
    }
}

/// Fails with [`Error::Invalid`] unless `cond` holds.
pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Invalid(msg()))
    }
}
