//! KL-divergence similarity regularizers over pooled, softmax-normalized
//! feature maps, with analytic gradients.
//!
//! Two terms are provided: an intra-frame term pulling each layer's
//! distribution toward a running mean, and an inter-frame term comparing
//! distributions of consecutive frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{adaptive_pool_1d, pool_buckets, softmax_normalize, Real};

/// Smoothing added to both sides of the log ratio.
pub const KL_EPS: f64 = 1e-8;

const SUM_TOL: f64 = 1e-4;

/// Flattened per-layer feature vectors of one frame. Entry `i` belongs to
/// instrumented layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet<T = f32> {
    pub frame: usize,
    pub maps: Vec<Vec<T>>,
}

impl<T: Real> FeatureMapSet<T> {
    pub fn new(frame: usize, maps: Vec<Vec<T>>) -> Result<Self> {
        if maps.iter().any(|m| m.is_empty()) {
            return Err(Error::arg("feature maps must be non-empty"));
        }
        Ok(FeatureMapSet { frame, maps })
    }

    pub fn n_layers(&self) -> usize {
        self.maps.len()
    }

    /// Adds `c` to every entry of every layer.
    pub fn shifted(&self, c: T) -> Self {
        FeatureMapSet {
            frame: self.frame,
            maps: self
                .maps
                .iter()
                .map(|m| m.iter().map(|&v| v + c).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Layer `i` at frame `t` against layer `i` at frame `t+1`.
    #[default]
    SameLayer,
    /// Layer `i` at frame `t` against every layer `j > i` at frame `t+1`.
    CrossLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Intra-frame strength.
    pub lambda: f64,
    /// Inter-frame strength.
    pub lambda_t: f64,
    pub pairing: Pairing,
    /// Per-pair weights `w[i][j]`. Unset means 1 on every selected pair.
    /// The training loss scales the weighted sum by `lambda_t`.
    pub pair_weights: Option<Vec<Vec<f64>>>,
    /// Pooled distribution length.
    pub pool_len: usize,
    /// Number of consecutive frames grouped for the inter-frame term.
    pub window: usize,
    /// EMA momentum of the running means during training.
    pub mean_momentum: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda: 0.001,
            lambda_t: 0.0,
            pairing: Pairing::SameLayer,
            pair_weights: None,
            pool_len: 64,
            window: 2,
            mean_momentum: 0.99,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and >= 0"));
        }
        if !(self.lambda_t >= 0.0 && self.lambda_t.is_finite()) {
            return Err(Error::config("lambda_t must be finite and >= 0"));
        }
        if self.pool_len == 0 {
            return Err(Error::config("pool_len must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::config("window must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mean_momentum) {
            return Err(Error::config("mean_momentum must lie in [0, 1]"));
        }
        if let Some(w) = &self.pair_weights {
            if w.iter().flatten().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::config("pair weights must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Weighted layer pairs `(i, j, w)` for `n_layers` instrumented layers.
    pub fn pairs(&self, n_layers: usize) -> Result<Vec<(usize, usize, f64)>> {
        if let Some(w) = &self.pair_weights {
            if w.len() != n_layers || w.iter().any(|r| r.len() != n_layers) {
                return Err(Error::config(format!(
                    "pair weights must be {n_layers}x{n_layers}"
                )));
            }
        }
        let weight = |i: usize, j: usize| self.pair_weights.as_ref().map_or(1.0, |w| w[i][j]);
        Ok(match self.pairing {
            Pairing::SameLayer => (0..n_layers).map(|i| (i, i, weight(i, i))).collect(),
            Pairing::CrossLayer => (0..n_layers)
                .flat_map(|i| (i + 1..n_layers).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, weight(i, j)))
                .collect(),
        })
    }
}

fn check_distribution<T: Real>(p: &[T], name: &str) -> Result<()> {
    let s: f64 = p.iter().map(|v| v.to_f64()).sum();
    if (s - 1.0).abs() > SUM_TOL || p.iter().any(|v| v.to_f64() < 0.0) {
        return Err(Error::arg(format!(
            "{name} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// `Σ p_k ln((p_k + ε) / (q_k + ε))` with `ε = KL_EPS`.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_raw(p, q))
}

fn kl_raw<T: Real, U: Real>(p: &[T], q: &[U]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let (p, q) = (p.to_f64(), q.to_f64());
            p * ((p + KL_EPS) / (q + KL_EPS)).ln()
        })
        .sum()
}

/// Gradients of [`kl_divergence`] with respect to `p` and `q`.
fn kl_grads(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let dp = ((p + KL_EPS) / (q + KL_EPS)).ln() + p / (p + KL_EPS);
            let dq = -p / (q + KL_EPS);
            (dp, dq)
        })
        .unzip()
}

/// Pools `f` to length `p` and applies a softmax.
pub fn prepare_distribution<T: Real>(f: &[T], p: usize) -> Result<Vec<f64>> {
    let f64s: Vec<f64> = f.iter().map(|v| v.to_f64()).collect();
    Ok(softmax_normalize(&adaptive_pool_1d(&f64s, p)?))
}

/// Pulls a gradient on the prepared distribution `s` back to the raw vector
/// of length `n`.
fn prepare_backward(n: usize, s: &[f64], grad_s: &[f64]) -> Vec<f64> {
    let inner: f64 = s.iter().zip(grad_s).map(|(a, b)| a * b).sum();
    let mut out = vec![0.0; n];
    for (b, (sk, gk)) in pool_buckets(n, s.len())
        .into_iter()
        .zip(s.iter().zip(grad_s))
    {
        let gz = sk * (gk - inner) / b.len() as f64;
        for v in &mut out[b] {
            *v += gz;
        }
    }
    out
}

fn to_t<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

/// How the running means accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMode {
    /// `μ ← m·μ + (1−m)·p`.
    Ema { momentum: f64 },
    /// Exact mean of every distribution seen so far.
    Cumulative,
}

/// Per-layer mean distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMeans {
    pub means: Vec<Vec<f64>>,
    pub mode: MeanMode,
    pub seen: u64,
}

impl RunningMeans {
    pub fn uniform(n_layers: usize, pool_len: usize, mode: MeanMode) -> Self {
        RunningMeans {
            means: vec![vec![1.0 / pool_len as f64; pool_len]; n_layers],
            mode,
            seen: 0,
        }
    }

    pub fn from_distributions(means: Vec<Vec<f64>>, mode: MeanMode) -> Result<Self> {
        for (i, m) in means.iter().enumerate() {
            check_distribution(m, &format!("mean of layer {i}"))?;
        }
        if let MeanMode::Ema { momentum } = mode {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(Error::config("momentum must lie in [0, 1]"));
            }
        }
        Ok(RunningMeans {
            means,
            mode,
            seen: 0,
        })
    }

    /// Means initialized from one frame's prepared distributions.
    pub fn from_frame<T: Real>(
        fms: &FeatureMapSet<T>,
        pool_len: usize,
        mode: MeanMode,
    ) -> Result<Self> {
        let means = fms
            .maps
            .iter()
            .map(|f| prepare_distribution(f, pool_len))
            .collect::<Result<_>>()?;
        let mut out = RunningMeans::from_distributions(means, mode)?;
        out.seen = 1;
        Ok(out)
    }

    pub fn n_layers(&self) -> usize {
        self.means.len()
    }

    pub fn pool_len(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn check_layers<T>(&self, fms: &FeatureMapSet<T>) -> Result<()> {
        if self.means.len() != fms.maps.len() {
            return Err(Error::config(format!(
                "running means cover {} layers, feature maps have {}",
                self.means.len(),
                fms.maps.len()
            )));
        }
        Ok(())
    }
}

/// Folds one frame into the running means.
pub fn update_running_mean<T: Real>(
    means: &RunningMeans,
    fms: &FeatureMapSet<T>,
) -> Result<RunningMeans> {
    means.check_layers(fms)?;
    let weight_new = match means.mode {
        MeanMode::Ema { momentum } => 1.0 - momentum,
        MeanMode::Cumulative => 1.0 / (means.seen + 1) as f64,
    };
    let updated = means
        .means
        .iter()
        .zip(&fms.maps)
        .map(|(mu, f)| {
            let p = prepare_distribution(f, mu.len())?;
            Ok(mu
                .iter()
                .zip(p)
                .map(|(&m, p)| (1.0 - weight_new) * m + weight_new * p)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(RunningMeans {
        means: updated,
        mode: means.mode,
        seen: means.seen + 1,
    })
}

/// `r = Σ_i KL(prep(f_i) ‖ μ_i)` and `∂r/∂f_i`. The pooled length is taken
/// from the means.
pub fn intra_frame_reg<T: Real>(
    fms: &FeatureMapSet<T>,
    means: &RunningMeans,
) -> Result<(f64, Vec<Vec<T>>)> {
    means.check_layers(fms)?;
    let mut r = 0.0;
    let mut grads = Vec::with_capacity(fms.maps.len());
    for (f, mu) in fms.maps.iter().zip(&means.means) {
        let p = prepare_distribution(f, mu.len())?;
        r += kl_raw(&p, mu);
        let (dp, _) = kl_grads(&p, mu);
        grads.push(to_t(prepare_backward(f.len(), &p, &dp)));
    }
    Ok((r, grads))
}

/// Gradients of the inter-frame term for both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct InterGrads<T = f32> {
    pub current: Vec<Vec<T>>,
    pub next: Vec<Vec<T>>,
}

/// `r_t = Σ_(i,j) w_ij · KL(prep(FM_i,t) ‖ prep(FM_j,t+1))` over the pairs
/// selected by `cfg.pairing`.
pub fn inter_frame_reg<T: Real>(
    fms_t: &FeatureMapSet<T>,
    fms_next: &FeatureMapSet<T>,
    cfg: &RegConfig,
) -> Result<(f64, InterGrads<T>)> {
    if fms_next.frame != fms_t.frame + 1 {
        return Err(Error::arg(format!(
            "frames {} and {} are not consecutive",
            fms_t.frame, fms_next.frame
        )));
    }
    if fms_t.n_layers() != fms_next.n_layers() {
        return Err(Error::config(
            "consecutive frames have different layer sets",
        ));
    }
    let n = fms_t.n_layers();
    let prep = |set: &FeatureMapSet<T>| -> Result<Vec<Vec<f64>>> {
        set.maps
            .iter()
            .map(|f| prepare_distribution(f, cfg.pool_len))
            .collect()
    };
    let (pt, pn) = (prep(fms_t)?, prep(fms_next)?);
    let mut d_pt = vec![vec![0.0; cfg.pool_len]; n];
    let mut d_pn = vec![vec![0.0; cfg.pool_len]; n];
    let mut r = 0.0;
    for (i, j, w) in cfg.pairs(n)? {
        if w == 0.0 {
            continue;
        }
        r += w * kl_raw(&pt[i], &pn[j]);
        let (dp, dq) = kl_grads(&pt[i], &pn[j]);
        for (acc, g) in d_pt[i].iter_mut().zip(dp) {
            *acc += w * g;
        }
        for (acc, g) in d_pn[j].iter_mut().zip(dq) {
            *acc += w * g;
        }
    }
    let back = |set: &FeatureMapSet<T>, p: &[Vec<f64>], d: &[Vec<f64>]| {
        set.maps
            .iter()
            .zip(p.iter().zip(d))
            .map(|(f, (s, g))| to_t(prepare_backward(f.len(), s, g)))
            .collect()
    };
    Ok((
        r,
        InterGrads {
            current: back(fms_t, &pt, &d_pt),
            next: back(fms_next, &pn, &d_pn),
        },
    ))
}
