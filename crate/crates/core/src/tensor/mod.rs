//! Dense matrices, exact reference kernels and the `RFM1` file format.

mod io;
mod matrix;
mod ops;
mod real;

pub use io::{load_matrix, read_matrix, save_matrix, write_matrix, MATRIX_MAGIC};
#[cfg(test)]
pub(crate) use matrix::dot;
pub use matrix::{DenseMatrix, Matrix};
pub use ops::{
    adaptive_pool_1d, col2im, cosine_similarity, im2col, matmul_exact, matmul_macs, pool_buckets,
    softmax_normalize, ConvShape, FeatureMap,
};
pub use real::Real;
