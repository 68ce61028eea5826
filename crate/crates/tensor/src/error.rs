use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: kernel size {k} must be odd")]
    EvenKernel { op: &'static str, k: usize },
    #[error("{op}: stride must be at least 1")]
    ZeroStride { op: &'static str },
    #[error("{op}: spatial extent {extent} must be even")]
    OddExtent { op: &'static str, extent: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss does not depend on any leaf that requires a gradient")]
    DetachedGraph,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> TensorError {
    TensorError::ShapeMismatch { op, expected: format!("{expected:?}"), got: format!("{got:?}") }
}
