//! The two toy architectures and their forward pass on the tape.
//!
//! Frames enter as one `(B·H·W) × C` matrix (HWC frames stacked). Every
//! reuse site clusters the rows of its whole batch at once, so identical
//! rows from different frames share a centroid. Attention is the exception:
//! tokens only attend within their own frame, so Q and K/V are clustered
//! per frame.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{hashing_macs, Clustering, HasherConfig, LshHasher};
use crate::reuse::{quantize_8bit, softmax_rows, ReuseStats};
use crate::tensor::{im2col, matmul_macs, ConvShape, DenseMatrix, FeatureMap, Matrix, Real};

use super::tape::{NodeId, Tape};

pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;
pub const PATCH: usize = 4;
pub const D_MODEL: usize = 16;
pub const HEADS: usize = 2;
pub const D_FF: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// conv 3×3 (8) → relu → conv 3×3 (16) → relu → global mean → FC.
    TinyConvNet,
    /// 4×4 patch embedding → one 2-head block → token mean → FC.
    TinyVit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub architecture: Architecture,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        if self.channels == 0 {
            return Err(Error::config("frames need at least one channel"));
        }
        match self.architecture {
            Architecture::TinyConvNet if self.height < 5 || self.width < 5 => {
                Err(Error::config("TinyConvNet needs frames of at least 5x5"))
            }
            Architecture::TinyVit
                if self.height % PATCH != 0
                    || self.width % PATCH != 0
                    || self.height == 0
                    || self.width == 0 =>
            {
                Err(Error::config(format!(
                    "TinyViT needs frame sides that are positive multiples of {PATCH}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Names of the reuse sites, in forward order.
    pub fn layer_names(&self) -> &'static [&'static str] {
        match self.architecture {
            Architecture::TinyConvNet => &["conv1", "conv2", "fc"],
            Architecture::TinyVit => &["embed", "qkv", "mlp", "fc"],
        }
    }

    /// Names of the feature maps the regularizers see.
    pub fn feature_names(&self) -> &'static [&'static str] {
        match self.architecture {
            Architecture::TinyConvNet => &["A1", "A2"],
            Architecture::TinyVit => &["X", "Z", "Y"],
        }
    }

    /// Length of the rows each reuse site hashes. For `qkv` this is the Q
    /// row width; K/V rows are twice as wide.
    pub fn layer_row_dims(&self) -> Vec<usize> {
        match self.architecture {
            Architecture::TinyConvNet => vec![9 * self.channels, 9 * CONV1_FILTERS, CONV2_FILTERS],
            Architecture::TinyVit => vec![
                PATCH * PATCH * self.channels,
                D_MODEL / HEADS,
                D_MODEL,
                D_MODEL,
            ],
        }
    }

    fn conv_shapes(&self) -> Result<(ConvShape, ConvShape)> {
        let c1 = ConvShape::new(self.height, self.width, self.channels, 3, 3, CONV1_FILTERS)?;
        let c2 = ConvShape::new(c1.out_h(), c1.out_w(), CONV1_FILTERS, 3, 3, CONV2_FILTERS)?;
        Ok((c1, c2))
    }

    /// Tokens per frame of the ViT.
    pub fn tokens(&self) -> usize {
        (self.height / PATCH) * (self.width / PATCH)
    }

    /// `(rows, cols)` of every parameter matrix in storage order.
    ///
    /// TinyConvNet: `W1, b1, W2, b2, Wf, bf`. TinyViT: `We, be`, then
    /// `Wq, Wk, Wv` per head, then `Wo, W1, W2, Wf, bf`.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let c = self.n_classes;
        match self.architecture {
            Architecture::TinyConvNet => vec![
                (9 * self.channels, CONV1_FILTERS),
                (1, CONV1_FILTERS),
                (9 * CONV1_FILTERS, CONV2_FILTERS),
                (1, CONV2_FILTERS),
                (CONV2_FILTERS, c),
                (1, c),
            ],
            Architecture::TinyVit => {
                let dk = D_MODEL / HEADS;
                let mut v = vec![(PATCH * PATCH * self.channels, D_MODEL), (1, D_MODEL)];
                v.extend(std::iter::repeat_n((D_MODEL, dk), 3 * HEADS));
                v.extend([
                    (D_MODEL, D_MODEL),
                    (D_MODEL, D_FF),
                    (D_FF, D_MODEL),
                    (D_MODEL, c),
                    (1, c),
                ]);
                v
            }
        }
    }

    /// Hasher per reuse site: 8 bits over at most 8 sampled entries, seeded
    /// by site index.
    pub fn default_hashers(&self) -> Vec<HasherConfig> {
        self.layer_row_dims()
            .iter()
            .enumerate()
            .map(|(i, &d)| HasherConfig {
                input_dim: d.min(8),
                hash_size: 8,
                seed: i as u64,
            })
            .collect()
    }
}

/// Parameters plus the per-layer hashers.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    spec: ArchSpec,
    params: Vec<DenseMatrix>,
    hashers: Vec<LshHasher>,
}

impl ToyModel {
    /// Normal initialization with `std = sqrt(g / fan_in)`, `g = 2` for
    /// matrices feeding a ReLU and 1 otherwise; zero biases.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relu_fed: &[usize] = match spec.architecture {
            Architecture::TinyConvNet => &[0, 2],
            Architecture::TinyVit => &[3 + 3 * HEADS],
        };
        let params = spec
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (r, c))| {
                if r == 1 {
                    return DenseMatrix::zeros(1, c);
                }
                let gain = if relu_fed.contains(&i) { 2.0 } else { 1.0 };
                let std = (gain / r as f64).sqrt();
                Matrix::from_fn(r, c, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
            })
            .collect();
        let hashers = spec.default_hashers();
        Self::from_parts(spec, params, &hashers)
    }

    pub fn from_parts(
        spec: ArchSpec,
        params: Vec<DenseMatrix>,
        hashers: &[HasherConfig],
    ) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::config(format!(
                "{} parameter matrices, architecture has {}",
                params.len(),
                shapes.len()
            )));
        }
        for (i, (p, &s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s {
                return Err(Error::config(format!(
                    "parameter {i} is {}x{}, expected {}x{}",
                    p.rows(),
                    p.cols(),
                    s.0,
                    s.1
                )));
            }
        }
        let mut model = ToyModel {
            spec,
            params,
            hashers: Vec::new(),
        };
        model.set_hashers(hashers)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[DenseMatrix] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.params
    }

    pub fn hashers(&self) -> &[LshHasher] {
        &self.hashers
    }

    pub fn hasher_configs(&self) -> Vec<HasherConfig> {
        self.hashers.iter().map(LshHasher::config).collect()
    }

    /// Replaces the per-layer hashers; one per reuse site, each no wider than
    /// the rows it hashes.
    pub fn set_hashers(&mut self, hashers: &[HasherConfig]) -> Result<()> {
        let dims = self.spec.layer_row_dims();
        if hashers.len() != dims.len() {
            return Err(Error::config(format!(
                "{} hashers for {} reuse layers",
                hashers.len(),
                dims.len()
            )));
        }
        for ((h, &d), name) in hashers.iter().zip(&dims).zip(self.spec.layer_names()) {
            if h.input_dim > d {
                return Err(Error::config(format!(
                    "layer {name}: input_dim {} exceeds row length {d}",
                    h.input_dim
                )));
            }
        }
        self.hashers = hashers
            .iter()
            .map(HasherConfig::build)
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Frames `start..end` of `frames` (flattened HWC) as the forward input.
    pub(crate) fn batch_input<T: Real>(
        &self,
        frames: &[f32],
        n_frames: usize,
    ) -> Result<Matrix<T>> {
        let s = &self.spec;
        Matrix::new(
            n_frames * s.height * s.width,
            s.channels,
            frames.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }
}

/// Where a reuse site gets its clustering from.
pub(crate) enum Clusterer<'a> {
    /// No clustering: every site runs exactly.
    Exact,
    /// Hash now with the model's hashers; optionally keep the clusterings.
    Fresh {
        record: Option<Vec<Arc<Clustering>>>,
    },
    /// Replay clusterings recorded earlier, in site order.
    Frozen {
        sites: &'a [Arc<Clustering>],
        next: usize,
    },
}

impl Clusterer<'_> {
    fn site<T: Real>(&mut self, h: &LshHasher, x: &Matrix<T>) -> Result<Option<Arc<Clustering>>> {
        match self {
            Clusterer::Exact => Ok(None),
            Clusterer::Fresh { record } => {
                let c = Arc::new(Clustering::from_codes(&h.hash_rows(x)?));
                if let Some(r) = record {
                    r.push(c.clone());
                }
                Ok(Some(c))
            }
            Clusterer::Frozen { sites, next } => {
                let c = sites
                    .get(*next)
                    .ok_or_else(|| Error::config("frozen clustering plan is too short"))?;
                if c.n_rows() != x.rows() {
                    return Err(Error::config(format!(
                        "frozen clustering covers {} rows, site has {}",
                        c.n_rows(),
                        x.rows()
                    )));
                }
                *next += 1;
                Ok(Some(c.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ForwardOptions {
    pub collect_mse: bool,
    /// Snap reuse-site inputs and weights to the symmetric 8-bit grid.
    pub quantize: bool,
}

pub(crate) struct Forward<T> {
    pub tape: Tape<T>,
    pub params: Vec<NodeId>,
    pub logits: NodeId,
    /// Instrumented feature maps, frames stacked by rows.
    pub features: Vec<NodeId>,
    /// Input rows of every reuse site (frames stacked).
    pub layer_inputs: Vec<NodeId>,
    pub stats: Vec<ReuseStats>,
}

fn quantized<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    quantize_8bit(&m.cast::<f32>()).dequantize().cast()
}

/// Batched im2col indices into the flattened `(B·H·W) × C` input.
fn conv_indices(shape: &ConvShape, frames: usize) -> Result<Arc<Vec<usize>>> {
    let per = shape.in_h * shape.in_w * shape.in_c;
    let ids: Vec<f64> = (0..per).map(|i| i as f64).collect();
    let base = im2col(
        &FeatureMap::new(shape.in_h, shape.in_w, shape.in_c, ids)?,
        shape,
    )?;
    let mut out = Vec::with_capacity(frames * base.data().len());
    for f in 0..frames {
        out.extend(base.data().iter().map(|&i| i as usize + f * per));
    }
    Ok(Arc::new(out))
}

struct Builder<'a, 'c, T> {
    tape: Tape<T>,
    hashers: &'a [LshHasher],
    clusterer: &'a mut Clusterer<'c>,
    opts: ForwardOptions,
    stats: Vec<ReuseStats>,
}

impl<T: Real> Builder<'_, '_, T> {
    fn maybe_quantize(&mut self, x: NodeId) -> Result<NodeId> {
        if self.opts.quantize {
            self.tape.straight_through(x, quantized)
        } else {
            Ok(x)
        }
    }

    /// `x · w` through the reuse site `layer`.
    fn linear(&mut self, x: NodeId, w: NodeId, layer: usize) -> Result<NodeId> {
        let (xq, wq) = (self.maybe_quantize(x)?, self.maybe_quantize(w)?);
        let (n, k) = self.tape.value(xq).shape();
        let m = self.tape.value(wq).cols();
        let exact_macs = matmul_macs(n, k, m);
        let h = &self.hashers[layer];
        let (y, st) = match self.clusterer.site(h, self.tape.value(xq))? {
            None => {
                let y = self.tape.matmul(xq, wq)?;
                let st = ReuseStats {
                    macs_exact: exact_macs,
                    macs_reuse: exact_macs,
                    rows: n as u64,
                    clusters: n as u64,
                    ..ReuseStats::default()
                };
                (y, st)
            }
            Some(c) => {
                let cent = self.tape.centroids(xq, c.clone())?;
                let prod = self.tape.matmul(cent, wq)?;
                let y = self.tape.scatter(prod, c.clone())?;
                let st = ReuseStats {
                    macs_exact: exact_macs,
                    macs_reuse: matmul_macs(c.n_clusters(), k, m) + hashing_macs(h, n),
                    rows: n as u64,
                    clusters: c.n_clusters() as u64,
                    ..ReuseStats::default()
                };
                (y, st)
            }
        };
        let exact = self
            .opts
            .collect_mse
            .then(|| self.tape.value(x).matmul(self.tape.value(w)));
        self.record(layer, st, y, exact)?;
        Ok(y)
    }

    fn record(
        &mut self,
        layer: usize,
        mut st: ReuseStats,
        y: NodeId,
        exact: Option<Result<Matrix<T>>>,
    ) -> Result<()> {
        if let Some(exact) = exact {
            let v = self.tape.value(y);
            st.sq_err = Some(v.mse(&exact?)? * v.data().len() as f64);
            st.out_elems = v.data().len() as u64;
        }
        self.stats[layer].merge(&st);
        Ok(())
    }
}

fn exact_attention_half<T: Real>(
    x: &Matrix<T>,
    heads: &[[&Matrix<T>; 3]],
    w_o: &Matrix<T>,
) -> Result<Matrix<T>> {
    let scale = T::one() / T::from_usize(heads[0][0].cols()).sqrt();
    let mut outs = Vec::with_capacity(heads.len());
    for [wq, wk, wv] in heads {
        let p = softmax_rows(&x.matmul(wq)?.matmul_t(&x.matmul(wk)?)?.scale(scale));
        outs.push(p.matmul(&x.matmul(wv)?)?);
    }
    Matrix::hstack(&outs.iter().collect::<Vec<_>>())?
        .matmul(w_o)?
        .add(x)
}

/// Runs the model on `n_frames` stacked frames.
pub(crate) fn forward<T: Real>(
    model: &ToyModel,
    params: &[Matrix<T>],
    input: Matrix<T>,
    n_frames: usize,
    clusterer: &mut Clusterer<'_>,
    opts: ForwardOptions,
) -> Result<Forward<T>> {
    let spec = model.spec;
    if n_frames == 0
        || input.rows() != n_frames * spec.height * spec.width
        || input.cols() != spec.channels
    {
        return Err(Error::shape("batch input does not match the architecture"));
    }
    let hashers = &model.hashers[..];
    let mut b = Builder {
        tape: Tape::new(),
        hashers,
        clusterer,
        opts,
        stats: vec![ReuseStats::default(); spec.layer_names().len()],
    };
    let p: Vec<NodeId> = params.iter().map(|m| b.tape.leaf(m.clone())).collect();
    let x = b.tape.leaf(input);
    let (logits, features, layer_inputs) = match spec.architecture {
        Architecture::TinyConvNet => {
            let (s1, s2) = spec.conv_shapes()?;
            let cols1 = b.tape.gather(
                x,
                conv_indices(&s1, n_frames)?,
                n_frames * s1.positions(),
                s1.patch_len(),
            )?;
            let h1 = b.linear(cols1, p[0], 0)?;
            let h1 = b.tape.add_row(h1, p[1])?;
            let a1 = b.tape.relu(h1);
            let cols2 = b.tape.gather(
                a1,
                conv_indices(&s2, n_frames)?,
                n_frames * s2.positions(),
                s2.patch_len(),
            )?;
            let h2 = b.linear(cols2, p[2], 1)?;
            let h2 = b.tape.add_row(h2, p[3])?;
            let a2 = b.tape.relu(h2);
            let pooled = b.tape.mean_blocks(a2, s2.positions())?;
            let out = b.linear(pooled, p[4], 2)?;
            let logits = b.tape.add_row(out, p[5])?;
            (logits, vec![a1, a2], vec![cols1, cols2, pooled])
        }
        Architecture::TinyVit => {
            let t = spec.tokens();
            let patch = ConvShape::new(spec.height, spec.width, spec.channels, PATCH, PATCH, 1)?;
            // non-overlapping patches are the im2col rows anchored on the patch grid
            let full = conv_indices(&patch, 1)?;
            let per = spec.height * spec.width * spec.channels;
            let plen = patch.patch_len();
            let mut idx = Vec::with_capacity(n_frames * t * plen);
            for f in 0..n_frames {
                for i in (0..patch.out_h()).step_by(PATCH) {
                    for j in (0..patch.out_w()).step_by(PATCH) {
                        let row = i * patch.out_w() + j;
                        idx.extend(
                            full[row * plen..(row + 1) * plen]
                                .iter()
                                .map(|&v| v + f * per),
                        );
                    }
                }
            }
            let patches = b.tape.gather(x, Arc::new(idx), n_frames * t, plen)?;
            let e = b.linear(patches, p[0], 0)?;
            let xt = b.tape.add_row(e, p[1])?;
            let (wo, w1, w2, wf, bf) = (
                p[2 + 3 * HEADS],
                p[3 + 3 * HEADS],
                p[4 + 3 * HEADS],
                p[5 + 3 * HEADS],
                p[6 + 3 * HEADS],
            );
            let dk = D_MODEL / HEADS;
            let scale = T::one() / T::from_usize(dk).sqrt();
            let mut zs = Vec::with_capacity(n_frames);
            for f in 0..n_frames {
                let xf = b.tape.slice_rows(xt, f * t, (f + 1) * t);
                let mut st = ReuseStats::default();
                let mut outs = Vec::with_capacity(HEADS);
                for hd in 0..HEADS {
                    let (wq, wk, wv) = (p[2 + 3 * hd], p[3 + 3 * hd], p[4 + 3 * hd]);
                    let q = b.tape.matmul(xf, wq)?;
                    let k = b.tape.matmul(xf, wk)?;
                    let v = b.tape.matmul(xf, wv)?;
                    let kv = b.tape.hstack(vec![k, v])?;
                    let q = b.maybe_quantize(q)?;
                    let kv = b.maybe_quantize(kv)?;
                    let h = &hashers[1];
                    let cq = b.clusterer.site(h, b.tape.value(q))?;
                    let ckv = b.clusterer.site(h, b.tape.value(kv))?;
                    let proj = 3 * matmul_macs(t, D_MODEL, dk);
                    st.macs_exact += proj + 2 * matmul_macs(t, t, dk);
                    let o = match (cq, ckv) {
                        (Some(cq), Some(ckv)) => {
                            let qc = b.tape.centroids(q, cq.clone())?;
                            let kvc = b.tape.centroids(kv, ckv.clone())?;
                            let kc = b.tape.slice_cols(kvc, 0, dk);
                            let vc = b.tape.slice_cols(kvc, dk, 2 * dk);
                            let s = b.tape.matmul_t(qc, kc)?;
                            let s = b.tape.scale(s, scale);
                            let pr = b.tape.softmax_rows(s);
                            let oc = b.tape.matmul(pr, vc)?;
                            st.macs_reuse += proj
                                + 2 * matmul_macs(cq.n_clusters(), ckv.n_clusters(), dk)
                                + 2 * hashing_macs(h, t);
                            st.rows += 2 * t as u64;
                            st.clusters += (cq.n_clusters() + ckv.n_clusters()) as u64;
                            b.tape.scatter(oc, cq)?
                        }
                        _ => {
                            let kc = b.tape.slice_cols(kv, 0, dk);
                            let vc = b.tape.slice_cols(kv, dk, 2 * dk);
                            let s = b.tape.matmul_t(q, kc)?;
                            let s = b.tape.scale(s, scale);
                            let pr = b.tape.softmax_rows(s);
                            st.macs_reuse += proj + 2 * matmul_macs(t, t, dk);
                            st.rows += 2 * t as u64;
                            st.clusters += 2 * t as u64;
                            b.tape.matmul(pr, vc)?
                        }
                    };
                    outs.push(o);
                }
                let concat = b.tape.hstack(outs)?;
                let proj = b.tape.matmul(concat, wo)?;
                let zf = b.tape.add(proj, xf)?;
                st.macs_exact += matmul_macs(t, D_MODEL, D_MODEL);
                st.macs_reuse += matmul_macs(t, D_MODEL, D_MODEL);
                let exact = b.opts.collect_mse.then(|| {
                    let heads: Vec<[&Matrix<T>; 3]> = (0..HEADS)
                        .map(|hd| {
                            [
                                &params[2 + 3 * hd],
                                &params[3 + 3 * hd],
                                &params[4 + 3 * hd],
                            ]
                        })
                        .collect();
                    exact_attention_half(b.tape.value(xf), &heads, &params[2 + 3 * HEADS])
                });
                b.record(1, st, zf, exact)?;
                zs.push(zf);
            }
            let z = b.tape.vstack(zs)?;
            // the MLP acts row-wise, so it runs whole on the centroid rows
            let zq = b.maybe_quantize(z)?;
            let (n, h) = (n_frames * t, &hashers[2]);
            let mut st = ReuseStats {
                macs_exact: matmul_macs(n, D_MODEL, D_FF) + matmul_macs(n, D_FF, D_MODEL),
                rows: n as u64,
                ..ReuseStats::default()
            };
            let mlp = match b.clusterer.site(h, b.tape.value(zq))? {
                Some(c) => {
                    let nz = c.n_clusters();
                    st.macs_reuse = matmul_macs(nz, D_MODEL, D_FF)
                        + matmul_macs(nz, D_FF, D_MODEL)
                        + hashing_macs(h, n);
                    st.clusters = nz as u64;
                    let zc = b.tape.centroids(zq, c.clone())?;
                    let hid = b.tape.matmul(zc, w1)?;
                    let hid = b.tape.relu(hid);
                    let yc = b.tape.matmul(hid, w2)?;
                    b.tape.scatter(yc, c)?
                }
                None => {
                    st.macs_reuse = st.macs_exact;
                    st.clusters = n as u64;
                    let hid = b.tape.matmul(zq, w1)?;
                    let hid = b.tape.relu(hid);
                    b.tape.matmul(hid, w2)?
                }
            };
            let y = b.tape.add(mlp, z)?;
            let exact = b.opts.collect_mse.then(|| -> Result<Matrix<T>> {
                let zv = b.tape.value(z);
                let hid = zv.matmul(&params[3 + 3 * HEADS])?.map(|v| v.max(T::zero()));
                hid.matmul(&params[4 + 3 * HEADS])?.add(zv)
            });
            b.record(2, st, y, exact)?;
            let pooled = b.tape.mean_blocks(y, t)?;
            let out = b.linear(pooled, wf, 3)?;
            let logits = b.tape.add_row(out, bf)?;
            (logits, vec![xt, z, y], vec![patches, xt, z, pooled])
        }
    };
    Ok(Forward {
        tape: b.tape,
        params: p,
        logits,
        features,
        layer_inputs,
        stats: b.stats,
    })
}
