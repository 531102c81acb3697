//! Structured pruning of SwiGLU MLP neurons in decoder-only transformers,
//! scored by first-order Taylor saliency of a next-token criterion.

pub mod backprop;
pub mod cli;
pub mod criteria;
pub mod digest;
pub mod evaluation;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod scoring;

pub use error::{Error, Result};
