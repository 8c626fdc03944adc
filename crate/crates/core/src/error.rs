use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed audio file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("unsupported audio encoding in {path}: {msg}")]
    Unsupported { path: PathBuf, msg: String },
    #[error("sample {index} out of range: {value}")]
    Range { index: usize, value: f32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("signals are not aligned: {0} vs {1} samples")]
    Alignment(usize, usize),
    #[error("unpaired file(s): {0}")]
    Pairing(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse category used by the command line for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Shape(_) => ErrorKind::Config,
            Error::Format { .. }
            | Error::Unsupported { .. }
            | Error::Range { .. }
            | Error::Data(_)
            | Error::Alignment(..)
            | Error::Pairing(_) => ErrorKind::Data,
            Error::Integrity(_) => ErrorKind::Integrity,
            Error::Io(_) | Error::Json(_) => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Integrity,
    Io,
}
