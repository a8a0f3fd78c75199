//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants follow the failure categories of the
/// public operations: configuration (shape/parameter mismatches caught
/// before any work), input (bad runtime data), state (a component used
/// before it is ready), and so on.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible dimensions, invalid hyperparameters, mismatched
    /// parameter structures.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed runtime input (wrong shape, non-finite values, empty
    /// batch where one is required).
    #[error("input error: {0}")]
    Input(String),

    /// A component was used before the prerequisite artifact existed
    /// (untrained model, missing checkpoint).
    #[error("state error: {0}")]
    State(String),

    /// The two augmented views share no source-image region.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Scene synthesis could not place the requested objects.
    #[error("generation error: {0}")]
    Generation(String),

    /// A training loss became non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file existed but did not parse as the documented format.
    #[error("{path}: {message}")]
    DataFormat { path: PathBuf, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data_format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::DataFormat {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
