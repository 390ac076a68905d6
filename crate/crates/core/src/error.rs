use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("invalid tensor: shape {shape:?} needs {expected} values, got {actual}")]
    TensorSize {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("gradient output must be a scalar, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("unknown graph input `{0}`")]
    UnknownInput(String),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("non-finite gradient during {context} (step {step})")]
    NonFiniteGradient { context: &'static str, step: usize },
    #[error("non-finite loss during {context} (step {step})")]
    NonFiniteLoss { context: &'static str, step: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
