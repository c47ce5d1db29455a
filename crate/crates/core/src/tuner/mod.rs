//! Per-layer Bayesian tuning of `(hash_size, input_dim)`.
//!
//! Each layer is tuned on its own calibration rows: a GP surrogate is fitted
//! to the observed `Θ = mse / σ`, the candidate with the highest expected
//! improvement on the integer grid is evaluated next, and the lowest `Θ`
//! wins. Layers are independent and tuned concurrently.

mod gp;
mod oracle;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{HasherConfig, LshHasher};
use crate::stream::FrameStream;
use crate::tensor::DenseMatrix;
use crate::training::{layer_inputs, ToyModel};

pub use gp::{
    ei_closed_form, expected_improvement, GpPosterior, JITTER, LENGTH_SCALES, SIGNAL_VARIANCES,
};
pub use oracle::{layer_oracles, AttentionOracle, LayerOracle, MatmulOracle, MlpOracle};

/// Frames of the tuning stream the calibration rows come from.
pub const CALIBRATION_FRAMES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub hash_size: usize,
    pub input_dim: usize,
    pub mse: f64,
    pub sigma: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneBudget {
    pub n_init: usize,
    pub n_total: usize,
    pub max_hash_size: usize,
    pub min_input_dim: usize,
}

impl Default for TuneBudget {
    fn default() -> Self {
        TuneBudget {
            n_init: 5,
            n_total: 30,
            max_hash_size: 16,
            min_input_dim: 4,
        }
    }
}

impl TuneBudget {
    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.n_init > self.n_total {
            return Err(Error::config("need 1 <= n_init <= n_total"));
        }
        if self.max_hash_size == 0 || self.max_hash_size > crate::lsh::MAX_HASH_SIZE {
            return Err(Error::config(format!(
                "max_hash_size must lie in [1, {}]",
                crate::lsh::MAX_HASH_SIZE
            )));
        }
        if self.min_input_dim == 0 {
            return Err(Error::config("min_input_dim must be >= 1"));
        }
        Ok(())
    }

    /// Inclusive `input_dim` range for rows of length `row_len`. Rows
    /// shorter than `min_input_dim` are searched at their full length only.
    fn dim_range(&self, row_len: usize) -> (usize, usize) {
        (self.min_input_dim.min(row_len), row_len)
    }
}

/// Integer search space of one layer and its map onto the unit square.
#[derive(Debug, Clone, Copy)]
struct Space {
    hash: (usize, usize),
    dim: (usize, usize),
}

impl Space {
    fn new(budget: &TuneBudget, row_len: usize) -> Self {
        Space {
            hash: (1, budget.max_hash_size),
            dim: budget.dim_range(row_len),
        }
    }

    fn size(&self) -> usize {
        (self.hash.1 - self.hash.0 + 1) * (self.dim.1 - self.dim.0 + 1)
    }

    fn all(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.hash.0..=self.hash.1)
            .flat_map(move |h| (self.dim.0..=self.dim.1).map(move |d| (h, d)))
    }

    fn normalize(&self, (h, d): (usize, usize)) -> [f64; 2] {
        let unit = |v: usize, (lo, hi): (usize, usize)| {
            if hi == lo {
                0.5
            } else {
                (v - lo) as f64 / (hi - lo) as f64
            }
        };
        [unit(h, self.hash), unit(d, self.dim)]
    }

    fn from_unit(&self, u: [f64; 2]) -> (usize, usize) {
        let pick = |x: f64, (lo, hi): (usize, usize)| {
            lo + ((x * (hi - lo + 1) as f64) as usize).min(hi - lo)
        };
        (pick(u[0], self.hash), pick(u[1], self.dim))
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// First `n` distinct grid points of a Halton(2, 3) sequence under a random
/// shift drawn from `seed`.
fn initial_design(space: &Space, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 2] = [rng.random(), rng.random()];
    let n = n.min(space.size());
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut i = 1u64;
    while out.len() < n {
        let u = [
            (radical_inverse(i, 2) + shift[0]).fract(),
            (radical_inverse(i, 3) + shift[1]).fract(),
        ];
        let p = space.from_unit(u);
        if seen.insert(p) {
            out.push(p);
        }
        i += 1;
    }
    out
}

/// `Θ` of one hasher setting on the calibration rows.
pub fn theta_objective(
    oracle: &dyn LayerOracle,
    x: &DenseMatrix,
    exact: &DenseMatrix,
    hash_size: usize,
    input_dim: usize,
    hasher_seed: u64,
) -> Result<TrialRecord> {
    if x.rows() == 0 {
        return Err(Error::arg("empty calibration batch"));
    }
    if input_dim == 0 || input_dim > oracle.row_len() {
        return Err(Error::arg(format!(
            "input_dim {input_dim} outside [1, {}]",
            oracle.row_len()
        )));
    }
    let h = LshHasher::new(input_dim, hash_size, hasher_seed)?;
    let (y, sigma) = oracle.reuse(x, &h)?;
    let mse = y.mse(exact)?;
    Ok(TrialRecord {
        hash_size,
        input_dim,
        mse,
        sigma,
        theta: mse / sigma,
    })
}

/// Outcome of tuning one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerTuning {
    pub best: TrialRecord,
    /// Every evaluation in order; the first `n_init` are the initial design.
    pub trials: Vec<TrialRecord>,
    /// Seed of the projections every trial used.
    pub hasher_seed: u64,
}

impl LayerTuning {
    pub fn hasher(&self) -> HasherConfig {
        HasherConfig {
            input_dim: self.best.input_dim,
            hash_size: self.best.hash_size,
            seed: self.hasher_seed,
        }
    }
}

fn argmin(trials: &[TrialRecord]) -> TrialRecord {
    // first minimum wins so ties resolve in evaluation order
    *trials
        .iter()
        .reduce(|b, t| if t.theta < b.theta { t } else { b })
        .expect("at least one trial")
}

fn evaluate_all(
    oracle: &dyn LayerOracle,
    x: &DenseMatrix,
    exact: &DenseMatrix,
    points: &[(usize, usize)],
    seed: u64,
) -> Result<Vec<TrialRecord>> {
    points
        .iter()
        .map(|&(h, d)| {
            theta_objective(oracle, x, exact, h, d, seed)
                .map_err(|e| Error::arg(format!("trial hash_size={h} input_dim={d}: {e}")))
        })
        .collect()
}

/// GP + expected-improvement search over the layer's integer grid.
pub fn tune_layer(
    oracle: &dyn LayerOracle,
    x: &DenseMatrix,
    budget: &TuneBudget,
    seed: u64,
) -> Result<LayerTuning> {
    budget.validate()?;
    let space = Space::new(budget, oracle.row_len());
    let exact = oracle.exact(x)?;
    let init = initial_design(&space, budget.n_init, seed);
    let mut evaluated: HashSet<(usize, usize)> = init.iter().copied().collect();
    let mut trials = evaluate_all(oracle, x, &exact, &init, seed)?;
    while trials.len() < budget.n_total.min(space.size()) {
        let xs: Vec<[f64; 2]> = trials
            .iter()
            .map(|t| space.normalize((t.hash_size, t.input_dim)))
            .collect();
        let ys: Vec<f64> = trials.iter().map(|t| t.theta).collect();
        let post = GpPosterior::fit(&xs, &ys)?;
        let best = post.best_standardized();
        let mut pick: Option<((usize, usize), f64)> = None;
        for p in space.all().filter(|p| !evaluated.contains(p)) {
            let ei = expected_improvement(&post, &space.normalize(p), best);
            if pick.is_none_or(|(_, b)| ei > b) {
                pick = Some((p, ei));
            }
        }
        let Some((p, _)) = pick else { break };
        evaluated.insert(p);
        trials.extend(evaluate_all(oracle, x, &exact, &[p], seed)?);
    }
    Ok(LayerTuning {
        best: argmin(&trials),
        trials,
        hasher_seed: seed,
    })
}

/// Uniform random search without repeats, the baseline for [`tune_layer`].
pub fn random_search(
    oracle: &dyn LayerOracle,
    x: &DenseMatrix,
    budget: &TuneBudget,
    seed: u64,
) -> Result<LayerTuning> {
    budget.validate()?;
    let space = Space::new(budget, oracle.row_len());
    let exact = oracle.exact(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<(usize, usize)> = space.all().collect();
    points.shuffle(&mut rng);
    points.truncate(budget.n_total);
    let trials = evaluate_all(oracle, x, &exact, &points, seed)?;
    Ok(LayerTuning {
        best: argmin(&trials),
        trials,
        hasher_seed: seed,
    })
}

/// Seed of layer `l`'s tuning run.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ layer as u64
}

/// Per-layer tuning results, keyed by layer name. Failed layers carry the
/// error message instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTuning {
    pub seed: u64,
    pub budget: TuneBudget,
    pub layers: BTreeMap<String, LayerTuning>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<String, String>,
}

impl ModelTuning {
    /// Hashers in the model's layer order; layers without a result keep the
    /// model's current hasher.
    pub fn hashers_for(&self, model: &ToyModel) -> Vec<HasherConfig> {
        model
            .spec()
            .layer_names()
            .iter()
            .zip(model.hasher_configs())
            .map(|(name, current)| self.layers.get(*name).map_or(current, LayerTuning::hasher))
            .collect()
    }
}

/// Tunes every reuse layer of `model` on the first [`CALIBRATION_FRAMES`]
/// frames of `stream`, one independent run per layer. With `parallel`,
/// layers run on the rayon pool; results do not depend on it.
pub fn tune_model(
    model: &ToyModel,
    stream: &FrameStream,
    budget: &TuneBudget,
    seed: u64,
    parallel: bool,
) -> Result<ModelTuning> {
    budget.validate()?;
    let n = stream.n_frames().min(CALIBRATION_FRAMES);
    if n == 0 {
        return Err(Error::arg("empty calibration stream"));
    }
    let inputs = layer_inputs(model, stream, 0..n)?;
    let oracles = layer_oracles(model)?;
    let names = model.spec().layer_names();
    let run = |l: usize| tune_layer(oracles[l].as_ref(), &inputs[l], budget, layer_seed(seed, l));
    let results: Vec<Result<LayerTuning>> = if parallel {
        (0..names.len()).into_par_iter().map(run).collect()
    } else {
        (0..names.len()).map(run).collect()
    };
    let mut out = ModelTuning {
        seed,
        budget: *budget,
        layers: BTreeMap::new(),
        failures: BTreeMap::new(),
    };
    for (name, r) in names.iter().zip(results) {
        match r {
            Ok(t) => {
                out.layers.insert(name.to_string(), t);
            }
            Err(e) => {
                out.failures.insert(name.to_string(), e.to_string());
            }
        }
    }
    Ok(out)
}
