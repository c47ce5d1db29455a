//! Layer functions the tuner scores hasher settings against.

use crate::error::{Error, Result};
use crate::lsh::{Clustering, LshHasher};
use crate::reuse::{
    clustered_attention, exact_attention, reuse_matmul_with, AttentionClusters, AttentionWeights,
    HeadWeights, ReuseOptions,
};
use crate::tensor::DenseMatrix;
use crate::training::{Architecture, ToyModel, HEADS};

/// One reuse layer: its exact output and its reuse output under a hasher.
pub trait LayerOracle: Send + Sync {
    /// Length of the rows the hasher sees.
    fn row_len(&self) -> usize;

    fn exact(&self, x: &DenseMatrix) -> Result<DenseMatrix>;

    /// Reuse output and the compression ratio of the clustering(s) used.
    fn reuse(&self, x: &DenseMatrix, h: &LshHasher) -> Result<(DenseMatrix, f64)>;
}

/// `x · w`.
#[derive(Debug, Clone)]
pub struct MatmulOracle {
    pub w: DenseMatrix,
}

impl LayerOracle for MatmulOracle {
    fn row_len(&self) -> usize {
        self.w.rows()
    }

    fn exact(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.matmul(&self.w)
    }

    fn reuse(&self, x: &DenseMatrix, h: &LshHasher) -> Result<(DenseMatrix, f64)> {
        let (y, st) = reuse_matmul_with(x, &self.w, h, &ReuseOptions::default())?;
        Ok((y, st.sigma()))
    }
}

/// `relu(z · w_1) · w_2`, the transformer MLP without its residual.
#[derive(Debug, Clone)]
pub struct MlpOracle {
    pub w_1: DenseMatrix,
    pub w_2: DenseMatrix,
}

impl MlpOracle {
    fn mlp(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        z.matmul(&self.w_1)?.map(|v| v.max(0.0)).matmul(&self.w_2)
    }
}

impl LayerOracle for MlpOracle {
    fn row_len(&self) -> usize {
        self.w_1.rows()
    }

    fn exact(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.mlp(x)
    }

    fn reuse(&self, x: &DenseMatrix, h: &LshHasher) -> Result<(DenseMatrix, f64)> {
        let c = Clustering::from_codes(&h.hash_rows(x)?);
        let y = c.scatter(&self.mlp(&c.centroids(x)?)?)?;
        Ok((y, x.rows() as f64 / c.n_clusters() as f64))
    }
}

/// Attention half of a transformer block with Q and K/V clustering; the MLP
/// runs exactly. Rows are `tokens`-row frames stacked.
#[derive(Debug, Clone)]
pub struct AttentionOracle {
    pub weights: AttentionWeights,
    pub tokens: usize,
}

impl AttentionOracle {
    fn frames(&self, x: &DenseMatrix) -> Result<usize> {
        if self.tokens == 0 || x.rows() % self.tokens != 0 {
            return Err(Error::shape(format!(
                "{} rows are not whole frames of {} tokens",
                x.rows(),
                self.tokens
            )));
        }
        Ok(x.rows() / self.tokens)
    }
}

impl LayerOracle for AttentionOracle {
    fn row_len(&self) -> usize {
        self.weights.d_k()
    }

    fn exact(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let t = self.tokens;
        let outs = (0..self.frames(x)?)
            .map(|f| exact_attention(&x.slice_rows(f * t, (f + 1) * t), &self.weights))
            .collect::<Result<Vec<_>>>()?;
        DenseMatrix::vstack(&outs.iter().collect::<Vec<_>>())
    }

    fn reuse(&self, x: &DenseMatrix, h: &LshHasher) -> Result<(DenseMatrix, f64)> {
        let t = self.tokens;
        let (mut rows, mut clusters) = (0usize, 0usize);
        let mut outs = Vec::new();
        for f in 0..self.frames(x)? {
            let xf = x.slice_rows(f * t, (f + 1) * t);
            let mut q = Vec::new();
            let mut kv = Vec::new();
            for hw in &self.weights.heads {
                let qc = Clustering::from_codes(&h.hash_rows(&xf.matmul(&hw.w_q)?)?);
                let kvm = DenseMatrix::hstack(&[&xf.matmul(&hw.w_k)?, &xf.matmul(&hw.w_v)?])?;
                let kvc = Clustering::from_codes(&h.hash_rows(&kvm)?);
                rows += 2 * t;
                clusters += qc.n_clusters() + kvc.n_clusters();
                q.push(qc);
                kv.push(kvc);
            }
            let cl = AttentionClusters {
                q,
                kv,
                mlp: Clustering::singletons(t),
            };
            outs.push(clustered_attention(&xf, &self.weights, &cl, &ReuseOptions::default())?.0);
        }
        let y = DenseMatrix::vstack(&outs.iter().collect::<Vec<_>>())?;
        Ok((y, rows as f64 / clusters as f64))
    }
}

/// One oracle per reuse layer of `model`, in layer order.
pub fn layer_oracles(model: &ToyModel) -> Result<Vec<Box<dyn LayerOracle>>> {
    let p = model.params();
    let spec = model.spec();
    Ok(match spec.architecture {
        Architecture::TinyConvNet => vec![
            Box::new(MatmulOracle { w: p[0].clone() }),
            Box::new(MatmulOracle { w: p[2].clone() }),
            Box::new(MatmulOracle { w: p[4].clone() }),
        ],
        Architecture::TinyVit => {
            let heads = (0..HEADS)
                .map(|i| HeadWeights {
                    w_q: p[2 + 3 * i].clone(),
                    w_k: p[3 + 3 * i].clone(),
                    w_v: p[4 + 3 * i].clone(),
                })
                .collect();
            let o = 2 + 3 * HEADS;
            let weights =
                AttentionWeights::new(heads, p[o].clone(), p[o + 1].clone(), p[o + 2].clone())?;
            vec![
                Box::new(MatmulOracle { w: p[0].clone() }),
                Box::new(AttentionOracle {
                    weights,
                    tokens: spec.tokens(),
                }),
                Box::new(MlpOracle {
                    w_1: p[o + 1].clone(),
                    w_2: p[o + 2].clone(),
                }),
                Box::new(MatmulOracle {
                    w: p[o + 3].clone(),
                }),
            ]
        }
    })
}
