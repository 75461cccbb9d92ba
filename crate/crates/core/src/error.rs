use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error categories surfaced by the library and mapped to process exit codes by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// More masks in a view than object slots available.
    #[error("slot capacity exceeded: {masks} masks but only {slots} slots")]
    Capacity { masks: usize, slots: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("non-finite parameter in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the command-line front end.
    ///
    /// 2 for configuration problems, 3 for missing or malformed data, 4 for numerical failures.
    /// Usage errors (exit code 1) are raised by the argument parser before any of these exist.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InvalidInput(_)
            | Error::ShapeMismatch { .. }
            | Error::Data(_)
            | Error::Io { .. }
            | Error::UndefinedMetric(_) => 3,
            Error::Capacity { .. } => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "numerical",
            _ => "usage",
        }
    }
}

pub(crate) fn shape_err(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
