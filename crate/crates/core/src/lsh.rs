//! Random-projection LSH over matrix rows.
//!
//! Each row is reduced to `input_dim` entries by strided subsampling, then
//! projected onto `hash_size` standard-normal directions. The signs of the
//! projections form the code (bit set when the dot product is `>= 0`). Rows
//! with equal codes form one cluster whose centroid is the mean of its
//! members' full rows.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Matrix, Real};

pub const MAX_HASH_SIZE: usize = 64;

// Below this many projection MACs the rayon fan-out costs more than it saves.
const PARALLEL_HASH_THRESHOLD: usize = 1 << 16;

/// Serialized form of a hasher. Projections are regenerated from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HasherConfig {
    pub input_dim: usize,
    pub hash_size: usize,
    pub seed: u64,
}

impl HasherConfig {
    pub fn build(&self) -> Result<LshHasher> {
        LshHasher::new(self.input_dim, self.hash_size, self.seed)
    }
}

/// Frozen projection table plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LshHasher {
    input_dim: usize,
    hash_size: usize,
    seed: u64,
    projections: DenseMatrix,
}

impl LshHasher {
    /// Draws `hash_size × input_dim` i.i.d. standard normals from a ChaCha8
    /// stream seeded with `seed`, row by row.
    pub fn new(input_dim: usize, hash_size: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::arg("input_dim must be >= 1"));
        }
        if hash_size == 0 || hash_size > MAX_HASH_SIZE {
            return Err(Error::arg(format!(
                "hash_size must be in 1..={MAX_HASH_SIZE}, got {hash_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..hash_size * input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            input_dim,
            hash_size,
            seed,
            projections: DenseMatrix::new(hash_size, input_dim, data)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hash_size(&self) -> usize {
        self.hash_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projections(&self) -> &DenseMatrix {
        &self.projections
    }

    pub fn config(&self) -> HasherConfig {
        HasherConfig {
            input_dim: self.input_dim,
            hash_size: self.hash_size,
            seed: self.seed,
        }
    }

    /// Indices `⌊k·len/input_dim⌋` of the entries that get hashed.
    pub fn sample_indices(&self, row_len: usize) -> Vec<usize> {
        (0..self.input_dim)
            .map(|k| k * row_len / self.input_dim)
            .collect()
    }

    /// Binary code of one row; bit `b` is set when projection `b` is `>= 0`.
    pub fn hash_row<T: Real>(&self, row: &[T]) -> Result<u64> {
        if row.len() < self.input_dim {
            return Err(Error::shape(format!(
                "row of length {} is shorter than input_dim {}",
                row.len(),
                self.input_dim
            )));
        }
        Ok(self.code(row, &self.sample_indices(row.len())))
    }

    fn code<T: Real>(&self, row: &[T], idx: &[usize]) -> u64 {
        let mut code = 0u64;
        for (b, proj) in self.projections.row_iter().enumerate() {
            let mut acc = T::zero();
            for (&p, &i) in proj.iter().zip(idx) {
                acc += T::from_f64(p as f64) * row[i];
            }
            if acc >= T::zero() {
                code |= 1 << b;
            }
        }
        code
    }

    /// Codes for every row of `x`.
    pub fn hash_rows<T: Real>(&self, x: &Matrix<T>) -> Result<Vec<u64>> {
        if x.cols() < self.input_dim {
            return Err(Error::shape(format!(
                "rows of length {} are shorter than input_dim {}",
                x.cols(),
                self.input_dim
            )));
        }
        let idx = self.sample_indices(x.cols());
        let work = x.rows() * self.input_dim * self.hash_size;
        if work >= PARALLEL_HASH_THRESHOLD {
            Ok((0..x.rows())
                .into_par_iter()
                .map(|i| self.code(x.row(i), &idx))
                .collect())
        } else {
            Ok(x.row_iter().map(|r| self.code(r, &idx)).collect())
        }
    }
}

/// Multiply-accumulates spent hashing `n_rows` rows.
pub fn hashing_macs(h: &LshHasher, n_rows: usize) -> u64 {
    n_rows as u64 * h.hash_size as u64 * h.input_dim as u64
}

/// Row-to-cluster mapping without centroids.
///
/// Ids are dense and assigned in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    ids: Vec<usize>,
    counts: Vec<usize>,
}

impl Clustering {
    /// Groups equal codes. The `k`-th distinct code seen gets id `k`.
    pub fn from_codes(codes: &[u64]) -> Self {
        let mut first_seen: HashMap<u64, usize> = HashMap::with_capacity(codes.len());
        let mut counts = Vec::new();
        let ids = codes
            .iter()
            .map(|&c| {
                let next = counts.len();
                let id = *first_seen.entry(c).or_insert(next);
                if id == next {
                    counts.push(0);
                }
                counts[id] += 1;
                id
            })
            .collect();
        Self { ids, counts }
    }

    /// Every row in its own cluster.
    pub fn singletons(n: usize) -> Self {
        Self {
            ids: (0..n).collect(),
            counts: vec![1; n],
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.counts.len()
    }

    /// Compression ratio `n_rows / n_clusters`.
    pub fn sigma(&self) -> f64 {
        self.n_rows() as f64 / self.n_clusters().max(1) as f64
    }

    /// Member means of the rows of `x`.
    ///
    /// Each mean is accumulated as an offset from the cluster's first member,
    /// so a cluster of identical rows reproduces that row bit for bit.
    pub fn centroids<T: Real>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.expect_rows(x.rows())?;
        let cols = x.cols();
        let mut first = vec![usize::MAX; self.n_clusters()];
        let mut offsets = Matrix::zeros(self.n_clusters(), cols);
        for (i, (row, &id)) in x.row_iter().zip(&self.ids).enumerate() {
            if first[id] == usize::MAX {
                first[id] = i;
                continue;
            }
            let base = x.row(first[id]);
            for ((s, &v), &b) in offsets.row_mut(id).iter_mut().zip(row).zip(base) {
                *s += v - b;
            }
        }
        for (id, &n) in self.counts.iter().enumerate() {
            let n = T::from_usize(n);
            let base = x.row(first[id]);
            for (s, &b) in offsets.row_mut(id).iter_mut().zip(base) {
                *s = b + *s / n;
            }
        }
        Ok(offsets)
    }

    /// Adjoint of [`Self::centroids`]: each member receives `1/|cluster|` of
    /// its centroid's gradient.
    pub fn centroids_backward<T: Real>(&self, grad_centroids: &Matrix<T>) -> Result<Matrix<T>> {
        if grad_centroids.rows() != self.n_clusters() {
            return Err(Error::shape(format!(
                "{} centroid gradients for {} clusters",
                grad_centroids.rows(),
                self.n_clusters()
            )));
        }
        let cols = grad_centroids.cols();
        let mut data = Vec::with_capacity(self.n_rows() * cols);
        for &id in &self.ids {
            let n = T::from_usize(self.counts[id]);
            data.extend(grad_centroids.row(id).iter().map(|&g| g / n));
        }
        Ok(Matrix::from_raw(self.n_rows(), cols, data))
    }

    /// Output row `i` is row `ids[i]` of `per_cluster`.
    pub fn scatter<T: Real>(&self, per_cluster: &Matrix<T>) -> Result<Matrix<T>> {
        if per_cluster.rows() != self.n_clusters() {
            return Err(Error::shape(format!(
                "{} cluster rows for {} clusters",
                per_cluster.rows(),
                self.n_clusters()
            )));
        }
        let cols = per_cluster.cols();
        let mut data = Vec::with_capacity(self.n_rows() * cols);
        for &id in &self.ids {
            data.extend_from_slice(per_cluster.row(id));
        }
        Ok(Matrix::from_raw(self.n_rows(), cols, data))
    }

    /// Adjoint of [`Self::scatter`]: sums member gradients per cluster.
    pub fn scatter_backward<T: Real>(&self, grad: &Matrix<T>) -> Result<Matrix<T>> {
        self.expect_rows(grad.rows())?;
        let mut out = Matrix::zeros(self.n_clusters(), grad.cols());
        for (row, &id) in grad.row_iter().zip(&self.ids) {
            for (o, &g) in out.row_mut(id).iter_mut().zip(row) {
                *o += g;
            }
        }
        Ok(out)
    }

    fn expect_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n_rows() {
            return Err(Error::shape(format!(
                "clustering covers {} rows, matrix has {rows}",
                self.n_rows()
            )));
        }
        Ok(())
    }
}

/// Clustered input: per-row ids, centroids and compression ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T = f32> {
    pub clustering: Clustering,
    pub centroids: Matrix<T>,
}

impl<T: Real> ClusterAssignment<T> {
    pub fn cluster_id_per_row(&self) -> &[usize] {
        self.clustering.ids()
    }

    pub fn counts(&self) -> &[usize] {
        self.clustering.counts()
    }

    pub fn n_clusters(&self) -> usize {
        self.clustering.n_clusters()
    }

    pub fn sigma(&self) -> f64 {
        self.clustering.sigma()
    }
}

/// Hashes every row of `x` and groups equal codes.
pub fn cluster_rows<T: Real>(h: &LshHasher, x: &Matrix<T>) -> Result<ClusterAssignment<T>> {
    if x.rows() == 0 {
        return Err(Error::shape("cannot cluster a matrix with no rows"));
    }
    let clustering = Clustering::from_codes(&h.hash_rows(x)?);
    let centroids = clustering.centroids(x)?;
    Ok(ClusterAssignment {
        clustering,
        centroids,
    })
}
