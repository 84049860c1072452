//! Error taxonomy shared by every module.
//!
//! The variants are deliberately coarse: callers match on the *kind* of
//! failure (bad config vs. bad shapes vs. bad bytes on disk), while the
//! payload strings carry the specifics (offending shapes, paths, field
//! names). I/O errors always carry the path they happened on.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent
    /// (zero dimensions, threshold outside `[0, 1]`, ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric or API contract was violated at runtime
    /// (non-scalar loss root, `k` larger than the score count, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bytes on disk do not parse as the declared format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Files parse individually but disagree with each other
    /// (manifest counts vs. directory contents, checkpoint vs. config).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// An OS-level I/O failure, wrapped with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Convenience constructor for format errors.
    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
