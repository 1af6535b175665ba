use std::io;

use thiserror::Error;

/// Errors produced anywhere in the codec stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("causality violation: position {pos} is not yet coded")]
    Causality { pos: usize },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("malformed bitstream: {0}")]
    Bitstream(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("checksum mismatch: header records {expected:#010x}, decoded grid hashes to {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("invalid probability row at position {pos}: {reason}")]
    BadProbabilities { pos: usize, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
