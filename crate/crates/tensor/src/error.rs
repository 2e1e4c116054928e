use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    RankError {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for buffer of length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("conv2d: output would be empty for input {input:?}")]
    EmptyOutput { input: Vec<usize> },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: tensor is not on this tape or does not require grad")]
    DetachedTensor,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
