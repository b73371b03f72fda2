//! Crate-wide error type.
//!
//! File-format problems get one variant per failure class so callers (and
//! tests) can tell a bad magic from a truncation from a dimension overflow.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric error: non-finite values in {0}")]
    NonFinite(String),

    /// Argument outside its mathematical domain (negative exposure time, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Weight map does not provide what the forward pass needs.
    #[error("structural error: {0}")]
    Structure(String),

    /// API misuse (non-scalar loss, backward before forward, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A documented invariant was violated at runtime.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed {format} header in {path}: {detail}")]
    MalformedHeader {
        format: &'static str,
        path: PathBuf,
        detail: String,
    },

    /// Images in one sample directory disagree on their dimensions.
    #[error("dimension mismatch in {path}: {detail}")]
    DimMismatch { path: PathBuf, detail: String },

    #[error("bad magic in {0}: expected {1}")]
    BadMagic(PathBuf, &'static str),

    #[error("truncated file {0}: {1}")]
    Truncated(PathBuf, String),

    #[error("trailing bytes after payload in {0}")]
    TrailingBytes(PathBuf),

    #[error("duplicate tensor name {0:?} in {1}")]
    DuplicateName(String, PathBuf),

    #[error("dimension overflow in {0}: {1}")]
    DimOverflow(PathBuf, String),

    /// exposures.txt values must be strictly increasing.
    #[error("exposure values not strictly increasing in {0}")]
    EvOrdering(PathBuf),

    #[error("refusing to overwrite input path {0}")]
    WouldOverwriteInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
