use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} (node {node}) produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },
    #[error("gradient flowing through {op} (node {node}) is not finite")]
    NonFiniteGrad { op: &'static str, node: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tape that does not record gradients")]
    NotRecording,
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("objective returned a non-finite value at parameter entry {0}")]
    NonFiniteObjective(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
