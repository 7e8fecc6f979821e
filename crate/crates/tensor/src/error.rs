use thiserror::Error;

/// Errors raised while building, evaluating or differentiating a graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor shape {shape:?} does not match {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("node {node} ({op}): shape mismatch: {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("duplicate input name `{0}`")]
    DuplicateInput(String),

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("input `{name}`: expected shape {expected:?}, got {got:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("node {node} ({op}): division by {value:e}, below guard {guard:e}")]
    DivisionGuard {
        node: usize,
        op: &'static str,
        value: f64,
        guard: f64,
    },

    #[error("node {node} ({op}): argument {value:e} outside the domain")]
    Domain { node: usize, op: &'static str, value: f64 },

    #[error("node {node} ({op}): non-finite value produced")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requested before forward evaluation")]
    NotEvaluated,

    #[error("backward root node {node} has shape {shape:?}, expected [1]")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
