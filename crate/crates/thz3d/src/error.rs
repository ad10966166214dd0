//! Error types shared across the crate.

use crate::volume::Domain;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ThzError {
    #[error("bad magic: expected \"THZ3\", got {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported volume format version {0}")]
    VersionMismatch(u32),

    #[error("truncated payload: expected {expected} samples, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected a {expected:?}-domain volume")]
    DomainMismatch { expected: Domain },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ThzError>;
