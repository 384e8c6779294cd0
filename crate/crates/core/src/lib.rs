//! Context-aware self-attention networks.
//!
//! A small, fully differentiable transformer encoder-decoder whose
//! self-attention layers can contextualize their query and key projections
//! with global, deep and deep-global context vectors mixed in through learned
//! gates. Alongside the model the crate carries synthetic seq2seq tasks, an
//! Adam training loop, gradient checking and gate-value analysis.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod context;
pub mod data;
pub mod error;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{NamedTensor, Tensor};
