//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// File system problem: missing file, unreadable path, short read.
    #[error("io error: {0}")]
    Io(String),
    /// File content does not match the declared format (bad magic, bad
    /// label value, inconsistent sidecar).
    #[error("format error: {0}")]
    Format(String),
    /// A `PhantomSpec` that cannot produce a valid phantom.
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    /// Value outside its documented range (e.g. uncertainty > 100).
    #[error("value out of range: {0}")]
    Range(String),
    /// Input on which the operation is mathematically undefined.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// A sampling stratum is empty.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// Array shapes incompatible with the operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// Inconsistent or unsupported configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Training aborted (non-finite loss).
    #[error("training error: {0}")]
    Train(String),
}

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io(format!("{}: {}", path.display(), err))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
