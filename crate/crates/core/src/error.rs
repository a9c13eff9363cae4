// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, KnError>;

/// Errors raised by the runtime, the analysis modules and the pipeline.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum KnError {
    /// Underlying filesystem failure.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A required file of a bundle or run directory is absent.
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// JSON or TOML could not be parsed.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    /// Manifest magic or version does not match what this build reads.
    #[error("checkpoint format mismatch: {0}")]
    Format(String),

    /// A tensor or input does not have the shape the config requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An index (token id, layer, neuron, head, position) is out of range.
    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// An operation received an input it cannot be evaluated on.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical quantity was degenerate (zero denominator, constant data).
    #[error("degenerate computation: {0}")]
    Degenerate(String),

    /// Edit bookkeeping violation (double apply, stale or unapplied record).
    #[error("edit error: {0}")]
    Edit(String),
}

impl KnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
