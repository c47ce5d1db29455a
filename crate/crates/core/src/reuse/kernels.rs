use crate::error::{Error, Result};
use crate::lsh::{cluster_rows, hashing_macs, Clustering, LshHasher};
use crate::tensor::{im2col, matmul_macs, ConvShape, DenseMatrix, FeatureMap, Matrix, Real};

use super::{ReuseOptions, ReuseStats};

fn check_matmul<T: Real>(x: &Matrix<T>, w: &Matrix<T>) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Centroid matmul with an externally supplied clustering: multiplies the
/// member means of `x` by `w` and scatters the products back to every row.
///
/// Stats carry the matmul MACs only; callers that hashed add that cost.
pub fn clustered_matmul<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    clustering: &Clustering,
    opts: &ReuseOptions,
) -> Result<(Matrix<T>, ReuseStats)> {
    check_matmul(x, w)?;
    let centroids = clustering.centroids(x)?;
    let y = clustering.scatter(&centroids.matmul(w)?)?;
    let mut stats = ReuseStats::from_clustering(clustering);
    stats.macs_exact = matmul_macs(x.rows(), x.cols(), w.cols());
    stats.macs_reuse = matmul_macs(clustering.n_clusters(), x.cols(), w.cols());
    if opts.collect_mse {
        let exact = x.matmul(w)?;
        stats.sq_err = Some(y.mse(&exact)? * y.data().len() as f64);
        stats.out_elems = y.data().len() as u64;
    }
    Ok((y, stats))
}

/// [`reuse_matmul`] with explicit options.
pub fn reuse_matmul_with<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    h: &LshHasher,
    opts: &ReuseOptions,
) -> Result<(Matrix<T>, ReuseStats)> {
    check_matmul(x, w)?;
    let clustering = cluster_rows(h, x)?.clustering;
    let (y, mut stats) = clustered_matmul(x, w, &clustering, opts)?;
    stats.macs_reuse += hashing_macs(h, x.rows());
    Ok((y, stats))
}

/// Clusters the rows of `x`, multiplies only the centroids by `w`, and
/// scatters the results back. Reconstruction error against the exact product
/// is collected.
pub fn reuse_matmul<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    h: &LshHasher,
) -> Result<(Matrix<T>, ReuseStats)> {
    reuse_matmul_with(x, w, h, &ReuseOptions::collecting())
}

/// Convolution lowered through [`im2col`] onto [`reuse_matmul`].
pub fn reuse_conv<T: Real>(
    x: &FeatureMap<T>,
    filters: &Matrix<T>,
    shape: &ConvShape,
    h: &LshHasher,
) -> Result<(FeatureMap<T>, ReuseStats)> {
    reuse_conv_with(x, filters, shape, h, &ReuseOptions::collecting())
}

pub fn reuse_conv_with<T: Real>(
    x: &FeatureMap<T>,
    filters: &Matrix<T>,
    shape: &ConvShape,
    h: &LshHasher,
    opts: &ReuseOptions,
) -> Result<(FeatureMap<T>, ReuseStats)> {
    if filters.shape() != (shape.patch_len(), shape.n_filters) {
        return Err(Error::shape(format!(
            "filter matrix is {}x{}, expected {}x{}",
            filters.rows(),
            filters.cols(),
            shape.patch_len(),
            shape.n_filters
        )));
    }
    let cols = im2col(x, shape)?;
    let (y, stats) = reuse_matmul_with(&cols, filters, h, opts)?;
    Ok((
        FeatureMap::from_matrix(shape.out_h(), shape.out_w(), y)?,
        stats,
    ))
}

/// Symmetric per-tensor 8-bit quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub scale: f32,
}

impl Quantized {
    pub fn dequantize(&self) -> DenseMatrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.codes.iter().map(|&q| q as f32 * self.scale).collect(),
        )
    }
}

/// `scale = max|m| / 127` (1 for an all-zero matrix); codes are
/// `round(m / scale)` clamped to `[-127, 127]`.
pub fn quantize_8bit(m: &DenseMatrix) -> Quantized {
    let max = m.max_abs();
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    let codes = m
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Quantized {
        rows: m.rows(),
        cols: m.cols(),
        codes,
        scale,
    }
}

/// Reuse matmul on the 8-bit grid: rows are quantized before hashing, so
/// rows within half a step of each other snap together. The centroid
/// product runs in `f32` on the dequantized values; the error is measured
/// against the exact product of the original `x`.
pub fn reuse_matmul_quantized(
    x: &DenseMatrix,
    w: &DenseMatrix,
    h: &LshHasher,
) -> Result<(DenseMatrix, ReuseStats)> {
    reuse_matmul_quantized_with(x, w, h, &ReuseOptions::collecting())
}

pub fn reuse_matmul_quantized_with(
    x: &DenseMatrix,
    w: &DenseMatrix,
    h: &LshHasher,
    opts: &ReuseOptions,
) -> Result<(DenseMatrix, ReuseStats)> {
    check_matmul(x, w)?;
    let xq = quantize_8bit(x).dequantize();
    let (y, mut stats) = reuse_matmul_with(&xq, w, h, &ReuseOptions::default())?;
    if opts.collect_mse {
        let exact = x.matmul(w)?;
        stats.sq_err = Some(y.mse(&exact)? * y.data().len() as f64);
        stats.out_elems = y.data().len() as u64;
    }
    Ok((y, stats))
}
