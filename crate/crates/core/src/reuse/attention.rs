//! Transformer block (multi-head self-attention plus MLP) with reuse.
//!
//! Per head, the Q rows are clustered on their own and the K and V rows are
//! clustered jointly on their concatenation so a key centroid always pairs
//! with the value centroid of the same members. Attention runs between the
//! Q centroids and the K/V centroids and the per-centroid outputs are
//! scattered back to tokens. The MLP input `Z` is clustered separately.
//! Residual additions and the `W_O` projection always run exactly.

use crate::error::{Error, Result};
use crate::lsh::{hashing_macs, Clustering, LshHasher};
use crate::tensor::{matmul_macs, Matrix, Real};

use super::{ReuseOptions, ReuseStats};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T = f32> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f32> {
    pub heads: Vec<HeadWeights<T>>,
    /// `H·d_k × d_model`.
    pub w_o: Matrix<T>,
    /// `d_model × d_ff`.
    pub w_1: Matrix<T>,
    /// `d_ff × d_model`.
    pub w_2: Matrix<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn new(
        heads: Vec<HeadWeights<T>>,
        w_o: Matrix<T>,
        w_1: Matrix<T>,
        w_2: Matrix<T>,
    ) -> Result<Self> {
        let w = Self {
            heads,
            w_o,
            w_1,
            w_2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d_model(&self) -> usize {
        self.w_o.cols()
    }

    pub fn d_k(&self) -> usize {
        self.heads.first().map_or(0, |h| h.w_q.cols())
    }

    pub fn d_ff(&self) -> usize {
        self.w_1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n_heads = self.heads.len();
        if n_heads == 0 {
            return Err(Error::shape("attention needs at least one head"));
        }
        let (d, dk) = (self.d_model(), self.d_k());
        if n_heads * dk != d {
            return Err(Error::shape(format!(
                "{n_heads} heads of width {dk} do not split d_model {d}"
            )));
        }
        for (i, h) in self.heads.iter().enumerate() {
            for (name, m) in [("W_Q", &h.w_q), ("W_K", &h.w_k), ("W_V", &h.w_v)] {
                if m.shape() != (d, dk) {
                    return Err(Error::shape(format!(
                        "head {i} {name} is {}x{}, expected {d}x{dk}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        if self.w_o.rows() != n_heads * dk {
            return Err(Error::shape("W_O rows must equal H·d_k"));
        }
        if self.w_1.rows() != d || self.w_2.shape() != (self.d_ff(), d) {
            return Err(Error::shape(format!(
                "MLP weights {}x{} and {}x{} do not match d_model {d}",
                self.w_1.rows(),
                self.w_1.cols(),
                self.w_2.rows(),
                self.w_2.cols()
            )));
        }
        let all = self
            .heads
            .iter()
            .flat_map(|h| [&h.w_q, &h.w_k, &h.w_v])
            .chain([&self.w_o, &self.w_1, &self.w_2]);
        for m in all {
            if !m.is_finite() {
                return Err(Error::NonFinite("attention weight".into()));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        self.validate()?;
        if x.cols() != self.d_model() {
            return Err(Error::shape(format!(
                "tokens have width {}, d_model is {}",
                x.cols(),
                self.d_model()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::shape("attention over zero tokens"));
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows<T: Real>(s: &Matrix<T>) -> Matrix<T> {
    let mut data = Vec::with_capacity(s.data().len());
    for row in s.row_iter() {
        data.extend(crate::tensor::softmax_normalize(row));
    }
    Matrix::from_raw(s.rows(), s.cols(), data)
}

pub(crate) fn relu<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|v| v.max(T::zero()))
}

/// Reference block: `Z = MHSA(X) + X`, `Y = MLP(Z) + Z`, with
/// `MLP(Z) = max(0, Z·W_1)·W_2`.
pub fn exact_attention<T: Real>(x: &Matrix<T>, w: &AttentionWeights<T>) -> Result<Matrix<T>> {
    w.check_input(x)?;
    let scale = T::one() / T::from_usize(w.d_k()).sqrt();
    let mut outs = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        let q = x.matmul(&h.w_q)?;
        let k = x.matmul(&h.w_k)?;
        let v = x.matmul(&h.w_v)?;
        let p = softmax_rows(&q.matmul_t(&k)?.scale(scale));
        outs.push(p.matmul(&v)?);
    }
    let concat = Matrix::hstack(&outs.iter().collect::<Vec<_>>())?;
    let z = concat.matmul(&w.w_o)?.add(x)?;
    let mlp = relu(&z.matmul(&w.w_1)?).matmul(&w.w_2)?;
    mlp.add(&z)
}

/// Per-part accounting of a [`reuse_attention`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub total: ReuseStats,
    pub q_sigma: Vec<f64>,
    pub kv_sigma: Vec<f64>,
    pub mlp_sigma: f64,
}

/// Clusterings used by one block call, one Q and one K/V clustering per
/// head plus one for the MLP input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionClusters {
    pub q: Vec<Clustering>,
    pub kv: Vec<Clustering>,
    pub mlp: Clustering,
}

/// Attention of centroid queries over centroid keys/values.
///
/// With `count_weighted`, each key centroid's score is offset by the log of
/// its member count, which reproduces exact attention whenever members are
/// identical.
pub(crate) fn centroid_attention<T: Real>(
    qc: &Matrix<T>,
    kc: &Matrix<T>,
    vc: &Matrix<T>,
    kv_counts: &[usize],
    count_weighted: bool,
) -> Result<Matrix<T>> {
    let scale = T::one() / T::from_usize(qc.cols()).sqrt();
    let mut s = qc.matmul_t(kc)?.scale(scale);
    if count_weighted {
        let logs: Vec<T> = kv_counts.iter().map(|&c| T::from_usize(c).ln()).collect();
        for i in 0..s.rows() {
            for (v, &l) in s.row_mut(i).iter_mut().zip(&logs) {
                *v += l;
            }
        }
    }
    softmax_rows(&s).matmul(vc)
}

/// The reuse block with fresh LSH clusterings. See the module docs.
pub fn reuse_attention<T: Real>(
    x: &Matrix<T>,
    w: &AttentionWeights<T>,
    h_qkv: &LshHasher,
    h_mlp: &LshHasher,
) -> Result<(Matrix<T>, ReuseStats)> {
    let (y, stats) = reuse_attention_with(x, w, h_qkv, h_mlp, &ReuseOptions::collecting())?;
    Ok((y, stats.total))
}

pub fn reuse_attention_with<T: Real>(
    x: &Matrix<T>,
    w: &AttentionWeights<T>,
    h_qkv: &LshHasher,
    h_mlp: &LshHasher,
    opts: &ReuseOptions,
) -> Result<(Matrix<T>, AttentionStats)> {
    w.check_input(x)?;
    let n = x.rows();
    let mut q_cl = Vec::with_capacity(w.heads.len());
    let mut kv_cl = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        let q = x.matmul(&h.w_q)?;
        let kv = Matrix::hstack(&[&x.matmul(&h.w_k)?, &x.matmul(&h.w_v)?])?;
        q_cl.push(Clustering::from_codes(&h_qkv.hash_rows(&q)?));
        kv_cl.push(Clustering::from_codes(&h_qkv.hash_rows(&kv)?));
    }
    // Z does not depend on the MLP clustering, so it can be hashed after the
    // attention half has run.
    let z = attention_half(x, w, &q_cl, &kv_cl, opts.count_weighted_attention)?;
    let mlp_cl = Clustering::from_codes(&h_mlp.hash_rows(&z)?);
    let clusters = AttentionClusters {
        q: q_cl,
        kv: kv_cl,
        mlp: mlp_cl,
    };
    let (y, mut stats) = clustered_attention(x, w, &clusters, opts)?;
    let hashes = 2 * w.heads.len() as u64 * hashing_macs(h_qkv, n) + hashing_macs(h_mlp, n);
    stats.total.macs_reuse += hashes;
    Ok((y, stats))
}

fn attention_half<T: Real>(
    x: &Matrix<T>,
    w: &AttentionWeights<T>,
    q_cl: &[Clustering],
    kv_cl: &[Clustering],
    count_weighted: bool,
) -> Result<Matrix<T>> {
    let dk = w.d_k();
    let mut outs = Vec::with_capacity(w.heads.len());
    for ((h, qc), kvc) in w.heads.iter().zip(q_cl).zip(kv_cl) {
        let q = x.matmul(&h.w_q)?;
        let k = x.matmul(&h.w_k)?;
        let v = x.matmul(&h.w_v)?;
        let qcent = qc.centroids(&q)?;
        let kv = kvc.centroids(&Matrix::hstack(&[&k, &v])?)?;
        let (kcent, vcent) = (kv.slice_cols(0, dk), kv.slice_cols(dk, 2 * dk));
        let oc = centroid_attention(&qcent, &kcent, &vcent, kvc.counts(), count_weighted)?;
        outs.push(qc.scatter(&oc)?);
    }
    let concat = Matrix::hstack(&outs.iter().collect::<Vec<_>>())?;
    concat.matmul(&w.w_o)?.add(x)
}

/// The reuse block with supplied clusterings. Stats exclude hashing cost.
pub fn clustered_attention<T: Real>(
    x: &Matrix<T>,
    w: &AttentionWeights<T>,
    clusters: &AttentionClusters,
    opts: &ReuseOptions,
) -> Result<(Matrix<T>, AttentionStats)> {
    w.check_input(x)?;
    let (n, d, dk, dff) = (x.rows(), w.d_model(), w.d_k(), w.d_ff());
    if clusters.q.len() != w.heads.len() || clusters.kv.len() != w.heads.len() {
        return Err(Error::shape(
            "one Q and one K/V clustering per head required",
        ));
    }
    for c in clusters.q.iter().chain(&clusters.kv).chain([&clusters.mlp]) {
        if c.n_rows() != n {
            return Err(Error::shape(format!(
                "clustering covers {} rows, block has {n} tokens",
                c.n_rows()
            )));
        }
    }
    let z = attention_half(
        x,
        w,
        &clusters.q,
        &clusters.kv,
        opts.count_weighted_attention,
    )?;
    // relu and W_2 act row-wise, so the whole MLP runs on the centroid rows
    let nz = clusters.mlp.n_clusters();
    let zc = clusters.mlp.centroids(&z)?;
    let yc = relu(&zc.matmul(&w.w_1)?).matmul(&w.w_2)?;
    let y = clusters.mlp.scatter(&yc)?.add(&z)?;
    let mut mlp_stats = ReuseStats::from_clustering(&clusters.mlp);
    mlp_stats.macs_exact = matmul_macs(n, d, dff) + matmul_macs(n, dff, d);
    mlp_stats.macs_reuse = matmul_macs(nz, d, dff) + matmul_macs(nz, dff, d);

    let mut total = ReuseStats::default();
    for (qc, kvc) in clusters.q.iter().zip(&clusters.kv) {
        let mut head = ReuseStats::from_clustering(qc);
        head.merge(&ReuseStats::from_clustering(kvc));
        let proj = 3 * matmul_macs(n, d, dk);
        head.macs_exact = proj + 2 * matmul_macs(n, n, dk);
        head.macs_reuse = proj + 2 * matmul_macs(qc.n_clusters(), kvc.n_clusters(), dk);
        total.merge(&head);
    }
    let wo = matmul_macs(n, d, d);
    total.macs_exact += wo;
    total.macs_reuse += wo;
    total.merge(&mlp_stats);
    if opts.collect_mse {
        let exact = exact_attention(x, w)?;
        total.sq_err = Some(y.mse(&exact)? * y.data().len() as f64);
        total.out_elems = y.data().len() as u64;
    }
    let stats = AttentionStats {
        total,
        q_sigma: clusters.q.iter().map(Clustering::sigma).collect(),
        kv_sigma: clusters.kv.iter().map(Clustering::sigma).collect(),
        mlp_sigma: clusters.mlp.sigma(),
    };
    Ok((y, stats))
}
