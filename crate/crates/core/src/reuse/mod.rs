//! Similarity-aware layer kernels.
//!
//! Every kernel clusters the rows of its matmul input with an [`LshHasher`],
//! multiplies only the centroids and scatters the products back to the
//! member rows. [`ReuseStats`] reports the MAC counts of both routes
//! (hashing included on the reuse side) and, when requested, the squared
//! error against the exact output.
//!
//! [`LshHasher`]: crate::lsh::LshHasher

mod attention;
mod kernels;
mod stats;
#[cfg(test)]
mod tests;

#[cfg(test)]
use attention::relu;
pub(crate) use attention::softmax_rows;
pub use attention::{
    clustered_attention, exact_attention, reuse_attention, reuse_attention_with, AttentionClusters,
    AttentionStats, AttentionWeights, HeadWeights,
};
pub use kernels::{
    clustered_matmul, quantize_8bit, reuse_conv, reuse_conv_with, reuse_matmul,
    reuse_matmul_quantized, reuse_matmul_quantized_with, reuse_matmul_with, Quantized,
};
pub use stats::ReuseStats;

/// Knobs shared by the reuse kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReuseOptions {
    /// Evaluate the exact kernel as well and record the squared error.
    pub collect_mse: bool,
    /// Weight each key centroid by its member count inside the attention
    /// softmax. Off by default: every key centroid counts once.
    pub count_weighted_attention: bool,
}

impl ReuseOptions {
    pub fn collecting() -> Self {
        Self {
            collect_mse: true,
            ..Self::default()
        }
    }
}
