use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected} tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward called before any forward pass was recorded")]
    BackwardBeforeForward,
    #[error("batchnorm in eval mode has no running statistics")]
    UninitializedRunningStats,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        NnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> NnError {
    NnError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
