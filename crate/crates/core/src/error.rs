use thiserror::Error;

/// Error type shared across the engine.
///
/// The variants map onto the failure classes the CLI reports through
/// distinct exit codes (see [`ErrorKind`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorKind::Config,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Data(_) | Error::Format(_) | Error::Domain(_) | Error::Shape(_) | Error::Io(_) | Error::Csv(_) => {
                ErrorKind::Data
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
