// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.
//!
//! Each variant belongs to one error class; the CLI maps classes to
//! distinct process exit codes via [`Error::exit_code`].

use std::path::PathBuf;

/// Convenience alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Mathematically undefined input (empty softmax axis, empty loss mask, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A template references a variable before it is defined, or similar.
    #[error("malformed chain: {0}")]
    Structure(String),

    /// Requested more distinct items than the sample space holds, or
    /// rejection sampling ran out of attempts.
    #[error("exhausted: {0}")]
    Exhausted(String),

    /// Text contains a symbol outside the fixed vocabulary.
    #[error("tokenization error: {0}")]
    Tokenize(String),

    /// Premise ordering mode not applicable to this problem.
    #[error("unsupported order mode: {0}")]
    UnsupportedMode(String),

    /// Corruption spec cannot be applied to the given problem.
    #[error("inapplicable corruption: {0}")]
    Inapplicable(String),

    /// Invalid user configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Checkpoint or dataset file is unreadable, corrupt, or from another version.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Optimizer saw NaN/inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// HTTP / remote endpoint failure.
    #[error("probe error: {0}")]
    Probe(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// Process exit code for this error class. 0 and 2 are reserved for
    /// success and command-line usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io { .. } => 4,
            Error::Format { .. } | Error::Json(_) => 5,
            Error::Exhausted(_) => 6,
            Error::Tokenize(_) | Error::Structure(_) | Error::UnsupportedMode(_) | Error::Inapplicable(_) => 7,
            Error::Dimension { .. } | Error::Domain { .. } | Error::Contract(_) | Error::NonFinite(_) => 8,
            Error::Probe(_) => 9,
        }
    }
}
