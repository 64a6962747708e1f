use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum NumError {
    /// Operand shapes do not conform; names both operation and operands.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// Class index outside the logit range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A module was wired with inconsistent widths or parameter shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation produced NaN or Inf.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Internal bookkeeping violated an invariant (e.g. optimizer moments
    /// for a frozen parameter).
    #[error("internal consistency error: {0}")]
    Consistency(String),

    /// A gradient-check closure returned different losses for identical
    /// parameters.
    #[error("non-deterministic loss closure: {0}")]
    NonDeterministic(String),

    /// Parameter name not present in the set.
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    /// Duplicate parameter name on insert.
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),

    /// Checkpoint file is malformed; offset points at the failing byte.
    #[error("checkpoint format error at byte {offset}: {details}")]
    CheckpointFormat { offset: usize, details: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;
