//! Minimal dense-tensor numeric core: reverse-mode differentiation over a
//! Wengert tape, named parameter stores, Adam with bias correction,
//! global-norm gradient clipping and a flat binary checkpoint format.

mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::AutodiffError;
pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Bindings, GradMap, ParamStore};
pub use tensor::Tensor;

/// Scalar type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type of every tensor.
#[cfg(feature = "f32")]
pub type Real = f32;
