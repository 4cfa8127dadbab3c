//! Associative-memory sequence models built on a small reverse-mode autodiff core.

pub mod architecture;
pub mod assoc_memory;
pub mod error;
pub mod extractors;
pub mod numerics;
pub mod tasks_eval;
pub mod training;

pub use error::{Error, Result};
pub use architecture::{Model, ModelConfig, ModelKind};
pub use numerics::{Graph, Tensor, Var};
