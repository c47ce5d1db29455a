//! Similarity-aware computation reuse for neural-network layers.
//!
//! Rows of a layer's input matrix are grouped with random-projection LSH and
//! only the cluster centroids are multiplied by the weights. The crate holds
//! the reuse kernels, the exact kernels they are checked against, KL-based
//! similarity regularizers for training, toy models trained end to end, a
//! per-layer Bayesian tuner for the hasher hyperparameters, and a synthetic
//! correlated frame-stream generator.

pub mod error;
pub mod lsh;
pub mod regularizers;
pub mod reuse;
pub mod stream;
pub mod tensor;
pub mod training;
pub mod tuner;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
