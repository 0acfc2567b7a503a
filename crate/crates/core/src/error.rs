use thiserror::Error;

/// Errors produced by the numerical engine and the embedding container.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("bad magic bytes {0:?}, not an embedding container")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("protocol mismatch: {0}")]
    Protocol(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            what,
            expected,
            actual,
        })
    }
}
