use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", .shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },

    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },

    #[error("{op}: axis {axis} mismatch, expected extent {expected}, got {got}")]
    AxisMismatch { op: &'static str, axis: usize, expected: usize, got: usize },

    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank { op: &'static str, expected: usize, got: Vec<usize> },

    #[error("{op}: shapes {a:?} and {b:?} do not broadcast")]
    Broadcast { op: &'static str, a: Vec<usize>, b: Vec<usize> },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("backward through a graph that was already freed (op {op})")]
    GraphFreed { op: &'static str },

    #[error("gradient of `{name}` contains non-finite values")]
    NonFiniteGradient { name: String },
}
