//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the library.
///
/// Variants are split between *validation* failures (bad arguments,
/// malformed config, shape mismatches — things the caller got wrong) and
/// *runtime* failures (I/O, diverging training). The CLI maps the former
/// to exit code 1 and the latter to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{what} out of range: {details}")]
    InvalidRange { what: String, details: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unknown metric {name:?}; registered metrics: {registered:?}")]
    UnknownMetric {
        name: String,
        registered: Vec<String>,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}: {components}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        components: String,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn range(what: impl Into<String>, details: impl Into<String>) -> Self {
        Error::InvalidRange {
            what: what.into(),
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a failure
    /// while doing otherwise-valid work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidRange { .. }
                | Error::Config(_)
                | Error::EmptyDataset(_)
                | Error::UnknownMetric { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
