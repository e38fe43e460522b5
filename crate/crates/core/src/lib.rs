//! Dynamic-vocabulary generation engine.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod retriever;
pub mod sampler;
pub mod text;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
