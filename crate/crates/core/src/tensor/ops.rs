//! Exact reference kernels and shared numeric helpers.

use std::ops::Range;

use crate::error::{Error, Result};

use super::{Matrix, Real};

/// Multiply-accumulate count of an `n×k` by `k×m` product.
#[inline]
pub fn matmul_macs(n: usize, k: usize, m: usize) -> u64 {
    (n as u64) * (k as u64) * (m as u64)
}

/// Plain dot-product matmul. Returns the product and its MAC count.
pub fn matmul_exact<T: Real>(x: &Matrix<T>, w: &Matrix<T>) -> Result<(Matrix<T>, u64)> {
    let y = x.matmul(w)?;
    Ok((y, matmul_macs(x.rows(), x.cols(), w.cols())))
}

/// An `H×W×C` feature map stored height-major, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} map needs {} entries, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map entry".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Reinterprets an `(H·W)×C` matrix as an `H×W×C` map.
    pub fn from_matrix(height: usize, width: usize, m: Matrix<T>) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::shape(format!(
                "{} rows cannot form a {height}x{width} map",
                m.rows()
            )));
        }
        let channels = m.cols();
        Ok(Self {
            height,
            width,
            channels,
            data: m.into_vec(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        self.data[(i * self.width + j) * self.channels + c]
    }

    /// The `(H·W)×C` matrix view (one row per pixel).
    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_raw(self.height * self.width, self.channels, self.data.clone())
    }

    pub fn into_matrix(self) -> Matrix<T> {
        Matrix::from_raw(self.height * self.width, self.channels, self.data)
    }
}

/// Geometry of a stride-1, unpadded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub n_filters: usize,
}

impl ConvShape {
    pub fn new(
        in_h: usize,
        in_w: usize,
        in_c: usize,
        k_h: usize,
        k_w: usize,
        n_filters: usize,
    ) -> Result<Self> {
        if [in_h, in_w, in_c, k_h, k_w, n_filters].contains(&0) {
            return Err(Error::shape("convolution dimensions must be >= 1"));
        }
        if k_h > in_h || k_w > in_w {
            return Err(Error::shape(format!(
                "{k_h}x{k_w} kernel does not fit a {in_h}x{in_w} input"
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            n_filters,
        })
    }

    pub fn out_h(&self) -> usize {
        self.in_h - self.k_h + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.k_w + 1
    }

    /// Number of output positions, i.e. im2col rows.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one flattened patch, i.e. im2col columns.
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }
}

/// Lowers a convolution input to a patch matrix.
///
/// Row `i·out_w + j` holds the patch anchored at `(i, j)`; within a row the
/// entries run over kernel row, kernel column, then channel. Filters must be
/// flattened the same way (a `patch_len × K` matrix).
pub fn im2col<T: Real>(x: &FeatureMap<T>, shape: &ConvShape) -> Result<Matrix<T>> {
    if (x.height, x.width, x.channels) != (shape.in_h, shape.in_w, shape.in_c) {
        return Err(Error::shape(format!(
            "input is {}x{}x{}, conv expects {}x{}x{}",
            x.height, x.width, x.channels, shape.in_h, shape.in_w, shape.in_c
        )));
    }
    let (oh, ow, kl) = (shape.out_h(), shape.out_w(), shape.patch_len());
    let seg = shape.k_w * shape.in_c;
    let mut data = Vec::with_capacity(oh * ow * kl);
    for i in 0..oh {
        for j in 0..ow {
            for r in 0..shape.k_h {
                let start = ((i + r) * x.width + j) * x.channels;
                data.extend_from_slice(&x.data[start..start + seg]);
            }
        }
    }
    Ok(Matrix::from_raw(oh * ow, kl, data))
}

/// Adjoint of [`im2col`]: accumulates patch-matrix entries back onto the map.
pub fn col2im<T: Real>(cols: &Matrix<T>, shape: &ConvShape) -> Result<FeatureMap<T>> {
    if cols.shape() != (shape.positions(), shape.patch_len()) {
        return Err(Error::shape(format!(
            "patch matrix is {}x{}, expected {}x{}",
            cols.rows(),
            cols.cols(),
            shape.positions(),
            shape.patch_len()
        )));
    }
    let (ow, c) = (shape.out_w(), shape.in_c);
    let seg = shape.k_w * c;
    let mut data = vec![T::zero(); shape.in_h * shape.in_w * c];
    for (p, row) in cols.row_iter().enumerate() {
        let (i, j) = (p / ow, p % ow);
        for r in 0..shape.k_h {
            let start = ((i + r) * shape.in_w + j) * c;
            for (d, &v) in data[start..start + seg]
                .iter_mut()
                .zip(&row[r * seg..(r + 1) * seg])
            {
                *d += v;
            }
        }
    }
    Ok(FeatureMap {
        height: shape.in_h,
        width: shape.in_w,
        channels: c,
        data,
    })
}

/// Cosine of the angle between `u` and `v`, accumulated in `f64`.
pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut uv, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64(), b.to_f64());
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Max-shifted softmax.
pub fn softmax_normalize<T: Real>(v: &[T]) -> Vec<T> {
    let Some(&first) = v.first() else {
        return Vec::new();
    };
    let m = v.iter().fold(first, |a, &b| a.max(b));
    let exps: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Bucket boundaries used by [`adaptive_pool_1d`].
///
/// With `n ≥ p` the buckets partition `0..n` contiguously with sizes that
/// differ by at most one. With `n < p` each bucket is a single element, so
/// shorter inputs are upsampled by repetition.
pub fn pool_buckets(n: usize, p: usize) -> Vec<Range<usize>> {
    (0..p)
        .map(|k| {
            let start = k * n / p;
            let end = if n >= p { (k + 1) * n / p } else { start + 1 };
            start..end
        })
        .collect()
}

/// Averages `v` down (or repeats it up) to length `p`.
pub fn adaptive_pool_1d<T: Real>(v: &[T], p: usize) -> Result<Vec<T>> {
    if p == 0 {
        return Err(Error::arg("pooled length must be >= 1"));
    }
    if v.is_empty() {
        return Err(Error::arg("cannot pool an empty vector"));
    }
    if v.len() == p {
        return Ok(v.to_vec());
    }
    Ok(pool_buckets(v.len(), p)
        .into_iter()
        .map(|b| {
            let len = T::from_usize(b.len());
            v[b].iter().copied().sum::<T>() / len
        })
        .collect())
}
