use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
