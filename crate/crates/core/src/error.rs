//! Error types shared across the crate.
//!
//! The taxonomy is deliberately coarse: shape and domain problems are caught
//! eagerly at operation boundaries, numeric problems (NaN/Inf) abort instead
//! of propagating, and file-format problems carry enough context to tell a
//! truncated file from a corrupted one.

use thiserror::Error;

/// Convenience alias used by every fallible function in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy the operation's contract.
    #[error("shape mismatch in {op}: left operand {left:?}, right operand {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An input value lies outside the mathematical domain of the operation
    /// (e.g. `log` of a non-positive number). `index` is the flat offset of
    /// the offending element.
    #[error("domain error in {op}: value {value} at flat index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    /// A NaN or infinity showed up mid-computation. Nothing downstream can be
    /// trusted, so we stop here rather than let it spread.
    #[error("non-finite value ({value}) produced by {op} at flat index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    /// An API contract was violated (wrong tape, non-scalar backward root,
    /// malformed one-hot vector, ...). The message names the broken rule.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value failed validation before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized artifact (checkpoint, IDX file) is malformed. The message
    /// distinguishes magic/version mismatches, truncation, and inconsistent
    /// shape metadata.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Helper for one-off contract violations.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Helper for configuration failures.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Helper for file-format failures.
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
