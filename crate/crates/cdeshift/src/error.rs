//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! kind of failure so callers (CLI, FFI) can map them to exit and status
//! codes; messages name the offending file, row, field, or argument.

use std::path::PathBuf;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem failure while reading or writing `path`.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or invalid tabular/catalog content in `path`; the message
    /// names the row and column where parsing or validation failed.
    #[error("{path}: {message}")]
    Table { path: PathBuf, message: String },

    /// Malformed JSON (config, manifest, or serialized model) in `path`.
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },

    /// A caller-supplied argument violates an operation's contract
    /// (dimension mismatch, empty grid, out-of-range value, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Data violates a sample invariant (non-finite cell, response outside
    /// [0,1], constant column where variation is required, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A configuration file is structurally valid but semantically wrong;
    /// the message names the offending field.
    #[error("invalid config: {0}")]
    Config(String),

    /// A numeric procedure degenerated (rank deficiency, unbounded density,
    /// empty neighborhood where mass is required, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An optimizer failed its convergence or cross-check contract.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A pipeline stage failed; wraps the underlying error with the name of
    /// the stage so end-to-end runs report where they aborted.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Convenience constructor for [`Error::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable tag for this failure kind, used by the CLI's
    /// error JSON and the FFI status codes. [`Error::Stage`] reports the
    /// kind of the underlying failure; the stage name travels in the
    /// message.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Table { .. } => "table",
            Error::Json { .. } => "json",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidData(_) => "invalid_data",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Solver(_) => "solver",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Convenience constructor for [`Error::Table`].
    pub fn table(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Table { path: path.into(), message: message.into() }
    }

    /// Convenience constructor for [`Error::Json`].
    pub fn json(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Json { path: path.into(), message: message.into() }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
