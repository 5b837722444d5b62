//! Tensor-train factorized dense layers inside a contrastive pretraining
//! pipeline, with parameter accounting and speedup benchmarks.

pub mod bench;
pub mod compression;
pub mod contrastive;
pub mod dataset;
mod error;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
