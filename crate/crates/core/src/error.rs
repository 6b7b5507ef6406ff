//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch between arrays, geometries or images.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid configuration value or inconsistent option combination.
    #[error("config error: {0}")]
    Config(String),
    /// A numerical precondition failed (non-positive precision, overflow).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Unrecognized magic bytes or unsupported format version.
    #[error("version error: {0}")]
    Version(String),
    /// Input is degenerate for the requested computation (zero norm, zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A model specification does not define a normalizable distribution.
    #[error("improper model: {0}")]
    ImproperModel(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
