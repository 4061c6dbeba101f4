//! Online contextualized few-shot learning.
//!
//! Episode samplers with latent environments, a slot-based prototype
//! memory, the contextual prototypical memory learner and its online
//! baselines, sequence-level training by backpropagation through time, and
//! the online evaluation metrics (average precision over the known/unknown
//! ranking, N-shot accuracy, forgetting tables).

pub mod config;
pub mod context;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod learners;
pub mod memory;
pub mod persist;
pub mod rng;
pub mod sequences;
pub mod training;

pub use error::{Error, Result};
pub use ocfsl_autodiff::Real;
