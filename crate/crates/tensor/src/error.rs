use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for extent {len}")]
    Index { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
