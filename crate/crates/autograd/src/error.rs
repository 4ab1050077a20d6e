use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("optimizer step without gradients")]
    MissingGrad,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> AutogradError {
    AutogradError::Invalid {
        op,
        reason: reason.into(),
    }
}
