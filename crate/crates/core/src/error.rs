use std::fmt;
use std::io;
use std::path::PathBuf;

use paddyspec_nn::NnError;
use thiserror::Error;

/// Registration stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Detect,
    Describe,
    Match,
    Filter,
    Estimate,
    Warp,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Detect => "detection",
            Stage::Describe => "description",
            Stage::Match => "matching",
            Stage::Filter => "filtering",
            Stage::Estimate => "estimation",
            Stage::Warp => "warping",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("registration failed at {stage}: {msg}")]
    Registration { stage: Stage, msg: String },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn stage(stage: Stage, msg: impl Into<String>) -> Self {
        Error::Registration {
            stage,
            msg: msg.into(),
        }
    }

    pub fn in_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad configuration or arguments rather than
    /// by the data being processed.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
