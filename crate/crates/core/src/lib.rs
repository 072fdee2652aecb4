//! Compact transformer language models with a neural cache, distillation,
//! pruning, quantization and exact cost accounting.

pub mod analysis;
pub mod cache;
pub mod checkpoint;
pub mod compression;
pub mod corpus;
mod error;
pub mod eval;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod score;
pub mod train;

pub use error::{Error, Result};
