use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("invalid shape {0:?}: dims must be non-empty and >= 1")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Mismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("matmul inner dimensions differ: {left:?} x {right:?}")]
    InnerDim { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("channel mismatch: layer expects {expected}, input has {found}")]
    Channels { expected: usize, found: usize },
    #[error("max-pool needs even spatial dims, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutogradError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("tape already consumed by backward; run a new forward pass")]
    TapeConsumed,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
