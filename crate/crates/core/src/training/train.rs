use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::Clustering;
use crate::regularizers::{
    inter_frame_reg, intra_frame_reg, update_running_mean, FeatureMapSet, MeanMode, RegConfig,
    RunningMeans,
};
use crate::reuse::ReuseStats;
use crate::stream::FrameStream;
use crate::tensor::{Matrix, Real};

use super::model::{forward, Clusterer, Forward, ForwardOptions, ToyModel};
use super::tape::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Forward passes during fine-tuning use the epoch-frozen clusterings.
    pub reuse_in_training: bool,
    /// Rescale each step's gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            reuse_in_training: true,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("clip_norm must be finite and > 0"));
        }
        Ok(())
    }
}

/// State of the model at the end of an epoch, measured by one evaluation
/// pass over the training stream. Epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean cross-entropy per frame.
    pub task_loss: f64,
    /// Mean intra-frame term per frame.
    pub r: f64,
    /// Mean inter-frame term per frame pair.
    pub r_t: f64,
    /// Mean loss per step during the epoch (`task + λ·r + λ_t·r_t` of each
    /// batch as trained). Equals `task_loss` for epoch 0.
    pub train_loss: f64,
    /// Compression ratio per reuse layer.
    pub sigma: Vec<f64>,
    /// Reconstruction error per reuse layer.
    pub recon_mse: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub use_reuse: bool,
    pub batch_size: usize,
    /// Snap reuse-site inputs and weights to 8 bits before hashing.
    pub quantize: bool,
    pub collect_mse: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_reuse: true,
            batch_size: 16,
            quantize: false,
            collect_mse: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// Classification accuracy.
    pub metric: f64,
    pub task_loss: f64,
    /// Per reuse layer, summed over batches.
    pub layers: Vec<ReuseStats>,
    pub total: ReuseStats,
}

/// Clusterings recorded by one batch's calibration pass, in site order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan(Vec<Arc<Clustering>>);

impl ClusterPlan {
    pub fn sites(&self) -> impl Iterator<Item = &Clustering> {
        self.0.iter().map(|c| c.as_ref())
    }
}

fn batches(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(size))
        .map(|b| b * size..((b + 1) * size).min(n))
        .collect()
}

fn labels_of<'a>(data: &'a FrameStream, range: &Range<usize>) -> Result<&'a [usize]> {
    data.labels()
        .map(|l| &l[range.clone()])
        .ok_or_else(|| Error::arg("training and evaluation need a labeled stream"))
}

fn check_stream(model: &ToyModel, data: &FrameStream) -> Result<()> {
    let s = model.spec();
    if data.shape() != (s.height, s.width, s.channels) {
        return Err(Error::config(format!(
            "stream frames are {:?}, model expects {}x{}x{}",
            data.shape(),
            s.height,
            s.width,
            s.channels
        )));
    }
    if data.n_frames() == 0 {
        return Err(Error::arg("empty stream"));
    }
    if let Some(&bad) = data
        .labels()
        .and_then(|l| l.iter().find(|&&c| c >= s.n_classes))
    {
        return Err(Error::config(format!(
            "label {bad} outside the model's {} classes",
            s.n_classes
        )));
    }
    Ok(())
}

fn run<T: Real>(
    model: &ToyModel,
    params: &[Matrix<T>],
    data: &FrameStream,
    range: &Range<usize>,
    clusterer: &mut Clusterer<'_>,
    opts: ForwardOptions,
) -> Result<Forward<T>> {
    let n = range.len();
    let frames = &data.data()[range.start * data.frame_len()..range.end * data.frame_len()];
    forward(
        model,
        params,
        model.batch_input(frames, n)?,
        n,
        clusterer,
        opts,
    )
}

/// Records the clusterings a fresh reuse forward pass produces for frames
/// `range` of `data`.
pub fn calibrate(model: &ToyModel, data: &FrameStream, range: Range<usize>) -> Result<ClusterPlan> {
    let mut c = Clusterer::Fresh {
        record: Some(Vec::new()),
    };
    run::<f32>(
        model,
        model.params(),
        data,
        &range,
        &mut c,
        ForwardOptions::default(),
    )?;
    let Clusterer::Fresh {
        record: Some(sites),
    } = c
    else {
        unreachable!("calibration always records")
    };
    Ok(ClusterPlan(sites))
}

/// Per-frame feature map sets of a forward pass; frame indices are global.
fn feature_sets<T: Real>(f: &Forward<T>, start: usize, n_frames: usize) -> Vec<FeatureMapSet<T>> {
    (0..n_frames)
        .map(|k| {
            let maps = f
                .features
                .iter()
                .map(|&id| {
                    let v = f.tape.value(id);
                    let per = v.rows() / n_frames;
                    v.slice_rows(k * per, (k + 1) * per).into_vec()
                })
                .collect();
            FeatureMapSet {
                frame: start + k,
                maps,
            }
        })
        .collect()
}

/// Consecutive frame pairs `(k, k+1)` of a batch whose global indices fall in
/// the same window of `window` frames.
fn window_pairs(start: usize, n_frames: usize, window: usize) -> Vec<usize> {
    (0..n_frames.saturating_sub(1))
        .filter(|&k| (start + k) / window == (start + k + 1) / window)
        .collect()
}

struct RegTerms<T> {
    r: f64,
    r_t: f64,
    value: f64,
    grads: Vec<Matrix<T>>,
}

/// Batch-mean intra and inter terms plus the gradient of
/// `λ·mean(r) + λ_t·mean(r_t)` with respect to each feature node.
fn reg_terms<T: Real>(
    f: &Forward<T>,
    sets: &[FeatureMapSet<T>],
    means: &RunningMeans,
    reg: &RegConfig,
) -> Result<RegTerms<T>> {
    let n = sets.len();
    let mut grads: Vec<Matrix<T>> = f
        .features
        .iter()
        .map(|&id| {
            let v = f.tape.value(id);
            Matrix::zeros(v.rows(), v.cols())
        })
        .collect();
    let mut add = |k: usize, layer_grads: &[Vec<T>], w: f64| {
        for (g, lg) in grads.iter_mut().zip(layer_grads) {
            let off = k * lg.len();
            for (d, &v) in g.data_mut()[off..off + lg.len()].iter_mut().zip(lg) {
                *d += T::from_f64(w) * v;
            }
        }
    };
    let mut r = 0.0;
    for (k, s) in sets.iter().enumerate() {
        let (rk, g) = intra_frame_reg(s, means)?;
        r += rk;
        if reg.lambda > 0.0 {
            add(k, &g, reg.lambda / n as f64);
        }
    }
    r /= n as f64;
    let pairs = window_pairs(sets[0].frame, n, reg.window);
    let mut r_t = 0.0;
    for &k in &pairs {
        let (rk, g) = inter_frame_reg(&sets[k], &sets[k + 1], reg)?;
        r_t += rk;
        if reg.lambda_t > 0.0 {
            let w = reg.lambda_t / pairs.len() as f64;
            add(k, &g.current, w);
            add(k + 1, &g.next, w);
        }
    }
    if !pairs.is_empty() {
        r_t /= pairs.len() as f64;
    }
    Ok(RegTerms {
        r,
        r_t,
        value: reg.lambda * r + reg.lambda_t * r_t,
        grads,
    })
}

/// Regularizer context of a training or evaluation pass.
pub struct RegState<'a> {
    pub config: &'a RegConfig,
    pub means: &'a RunningMeans,
}

/// Composite loss `CE + λ·r + λ_t·r_t` of frames `range` and its gradient
/// with respect to every parameter. With `plan`, reuse sites replay the
/// given clusterings; without, everything runs exactly.
pub fn composite_loss<T: Real>(
    model: &ToyModel,
    params: &[Matrix<T>],
    data: &FrameStream,
    range: Range<usize>,
    plan: Option<&ClusterPlan>,
    reg: Option<RegState<'_>>,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let labels = labels_of(data, &range)?;
    let mut clusterer = match plan {
        Some(p) => Clusterer::Frozen {
            sites: &p.0,
            next: 0,
        },
        None => Clusterer::Exact,
    };
    let mut f = run(
        model,
        params,
        data,
        &range,
        &mut clusterer,
        ForwardOptions::default(),
    )?;
    let ce = f.tape.cross_entropy(f.logits, labels)?;
    let mut root = ce;
    if let Some(RegState { config, means }) = reg {
        if config.lambda > 0.0 || config.lambda_t > 0.0 {
            let sets = feature_sets(&f, range.start, range.len());
            let terms = reg_terms(&f, &sets, means, config)?;
            let ext = f
                .tape
                .external(terms.value, f.features.clone(), terms.grads)?;
            root = f.tape.sum_scalars(vec![ce, ext]);
        }
    }
    let loss = f.tape.value(root).get(0, 0).to_f64();
    let mut grads = f.tape.backward(root)?;
    let pg = f
        .params
        .iter()
        .zip(params)
        .map(|(&id, p): (&NodeId, &Matrix<T>)| {
            grads[id]
                .take()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((loss, pg))
}

/// Accuracy, task loss and per-layer reuse accounting over the whole stream.
/// Reuse clusterings are computed on the fly per batch.
pub fn evaluate(model: &ToyModel, data: &FrameStream, opts: &EvalOptions) -> Result<Evaluation> {
    eval_pass(model, data, opts, None).map(|(e, _, _)| e)
}

fn eval_pass(
    model: &ToyModel,
    data: &FrameStream,
    opts: &EvalOptions,
    reg: Option<&RegState<'_>>,
) -> Result<(Evaluation, f64, f64)> {
    check_stream(model, data)?;
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let n_layers = model.spec().layer_names().len();
    let mut layers = vec![ReuseStats::default(); n_layers];
    let (mut correct, mut ce, mut r, mut r_t, mut pairs) = (0usize, 0.0f64, 0.0f64, 0.0f64, 0usize);
    let fopts = ForwardOptions {
        collect_mse: opts.collect_mse,
        quantize: opts.quantize,
    };
    for range in batches(data.n_frames(), opts.batch_size) {
        let labels = labels_of(data, &range)?;
        let mut clusterer = if opts.use_reuse {
            Clusterer::Fresh { record: None }
        } else {
            Clusterer::Exact
        };
        let mut f = run::<f32>(model, model.params(), data, &range, &mut clusterer, fopts)?;
        let logits = f.tape.value(f.logits);
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == y);
        }
        let node = f.tape.cross_entropy(f.logits, labels)?;
        ce += f.tape.value(node).get(0, 0) as f64 * range.len() as f64;
        for (acc, s) in layers.iter_mut().zip(&f.stats) {
            acc.merge(s);
        }
        if let Some(state) = reg {
            let sets = feature_sets(&f, range.start, range.len());
            let terms = reg_terms(&f, &sets, state.means, state.config)?;
            r += terms.r * range.len() as f64;
            let np = window_pairs(range.start, range.len(), state.config.window).len();
            r_t += terms.r_t * np as f64;
            pairs += np;
        }
    }
    let n = data.n_frames() as f64;
    let eval = Evaluation {
        metric: correct as f64 / n,
        task_loss: ce / n,
        total: ReuseStats::merged(&layers),
        layers,
    };
    Ok((
        eval,
        r / n,
        if pairs > 0 { r_t / pairs as f64 } else { 0.0 },
    ))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub reports: Vec<EpochReport>,
}

fn report(
    epoch: usize,
    model: &ToyModel,
    data: &FrameStream,
    cfg: &TrainConfig,
    use_reuse: bool,
    reg: Option<&RegState<'_>>,
    train_loss: Option<f64>,
) -> Result<EpochReport> {
    let opts = EvalOptions {
        use_reuse,
        batch_size: cfg.batch_size,
        quantize: false,
        collect_mse: use_reuse,
    };
    let (e, r, r_t) = eval_pass(model, data, &opts, reg)?;
    let rep = EpochReport {
        epoch,
        task_loss: e.task_loss,
        r,
        r_t,
        train_loss: train_loss.unwrap_or(e.task_loss),
        sigma: e.layers.iter().map(ReuseStats::sigma).collect(),
        recon_mse: e
            .layers
            .iter()
            .map(|s| s.recon_mse().unwrap_or(0.0))
            .collect(),
        accuracy: e.metric,
    };
    let finite = [rep.task_loss, rep.r, rep.r_t, rep.train_loss, rep.accuracy]
        .iter()
        .chain(&rep.sigma)
        .chain(&rep.recon_mse)
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Training {
            epoch,
            reason: "non-finite value in epoch report".into(),
        });
    }
    Ok(rep)
}

/// Initial running means: the exact mean distribution of every feature map
/// over the training stream.
fn initial_means(
    model: &ToyModel,
    data: &FrameStream,
    reg: &RegConfig,
    batch: usize,
) -> Result<RunningMeans> {
    let n_maps = model.spec().feature_names().len();
    let mut means = RunningMeans::uniform(n_maps, reg.pool_len, MeanMode::Cumulative);
    for range in batches(data.n_frames(), batch) {
        let f = run::<f32>(
            model,
            model.params(),
            data,
            &range,
            &mut Clusterer::Exact,
            ForwardOptions::default(),
        )?;
        for s in feature_sets(&f, range.start, range.len()) {
            means = update_running_mean(&means, &s)?;
        }
    }
    RunningMeans::from_distributions(
        means.means,
        MeanMode::Ema {
            momentum: reg.mean_momentum,
        },
    )
}

fn train_loop(
    model: &ToyModel,
    data: &FrameStream,
    cfg: &TrainConfig,
    reg: Option<&RegConfig>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stream(model, data)?;
    data.labels()
        .ok_or_else(|| Error::arg("training needs a labeled stream"))?;
    if let Some(r) = reg {
        r.validate()?;
    }
    let use_reuse = reg.is_some() && cfg.reuse_in_training;
    let regularize = reg.filter(|r| r.lambda > 0.0 || r.lambda_t > 0.0);
    let mut model = model.clone();
    let mut means = match reg {
        Some(r) => Some(initial_means(&model, data, r, cfg.batch_size)?),
        None => None,
    };
    fn state<'a>(
        reg: Option<&'a RegConfig>,
        means: &'a Option<RunningMeans>,
    ) -> Option<RegState<'a>> {
        reg.zip(means.as_ref())
            .map(|(config, means)| RegState { config, means })
    }
    let mut reports = vec![report(
        0,
        &model,
        data,
        cfg,
        use_reuse,
        state(reg, &means).as_ref(),
        None,
    )?];
    let ranges = batches(data.n_frames(), cfg.batch_size);
    let mut order: Vec<usize> = (0..ranges.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Matrix<f32>> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let (lr, mom) = (cfg.lr as f32, cfg.momentum as f32);
    for epoch in 1..=cfg.epochs {
        let plans = if use_reuse {
            Some(
                ranges
                    .iter()
                    .map(|r| calibrate(&model, data, r.clone()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &b in &order {
            let range = ranges[b].clone();
            let plan = plans.as_ref().map(|p| &p[b]);
            let rs = regularize
                .zip(means.as_ref())
                .map(|(config, means)| RegState { config, means });
            let (loss, mut grads) =
                composite_loss(&model, model.params(), data, range.clone(), plan, rs)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss is {loss}"),
                });
            }
            loss_sum += loss;
            if let (Some(m), Some(_)) = (means.as_mut(), regularize) {
                let mut c = match plan {
                    Some(p) => Clusterer::Frozen {
                        sites: &p.0,
                        next: 0,
                    },
                    None => Clusterer::Exact,
                };
                let f = run::<f32>(
                    &model,
                    model.params(),
                    data,
                    &range,
                    &mut c,
                    ForwardOptions::default(),
                )?;
                for s in feature_sets(&f, range.start, range.len()) {
                    *m = update_running_mean(m, &s)?;
                }
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                momentum_step(p.data_mut(), v.data_mut(), g.data(), lr, mom);
            }
            if !model.params().iter().all(Matrix::is_finite) {
                return Err(Error::Training {
                    epoch,
                    reason: "parameters became non-finite".into(),
                });
            }
        }
        let mean_loss = loss_sum / ranges.len() as f64;
        reports.push(report(
            epoch,
            &model,
            data,
            cfg,
            use_reuse,
            state(reg, &means).as_ref(),
            Some(mean_loss),
        )?);
    }
    Ok(TrainOutcome { model, reports })
}

fn clip_global_norm(grads: &mut [Matrix<f32>], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// `v ← m·v − lr·g; θ ← θ + v`, elementwise.
pub(crate) fn momentum_step<T: Real>(theta: &mut [T], v: &mut [T], g: &[T], lr: T, m: T) {
    for ((t, v), &g) in theta.iter_mut().zip(v).zip(g) {
        *v = m * *v - lr * g;
        *t += *v;
    }
}

/// Plain training with exact forward passes and cross-entropy only.
pub fn pretrain(model: &ToyModel, data: &FrameStream, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop(model, data, cfg, None)
}

/// Similarity-aware fine-tuning: per epoch, clusterings are frozen by a
/// calibration pass, forward passes reuse them (when
/// `cfg.reuse_in_training`), and the loss adds `λ·r + λ_t·r_t`.
pub fn sa_train(
    model: &ToyModel,
    data: &FrameStream,
    cfg: &TrainConfig,
    reg: &RegConfig,
) -> Result<TrainOutcome> {
    train_loop(model, data, cfg, Some(reg))
}
