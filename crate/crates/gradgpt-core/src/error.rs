//! Crate-wide error type.
//!
//! Data-dependent failures (bad token ids, malformed targets, invalid
//! configuration, checkpoint problems) surface as [`Error`] values. Shape
//! mismatches between tensors are programming errors and panic instead, with
//! both shapes in the message.

/// Failure modes surfaced to callers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A token id fell outside the embedding table.
    #[error("token id {id} at position {position} out of range for vocabulary of size {n_vocab}")]
    TokenOutOfRange { id: usize, position: usize, n_vocab: usize },

    /// A loss target fell outside the vocabulary.
    #[error("target id {id} at position {position} out of range for vocabulary of size {n_vocab}")]
    TargetOutOfRange { id: usize, position: usize, n_vocab: usize },

    /// A structurally invalid request (empty sequence, no loss targets, …).
    #[error("{0}")]
    Invalid(String),

    /// Model configuration violates an invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A checkpoint file is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
