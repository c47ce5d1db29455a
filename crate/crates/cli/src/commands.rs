use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use simreuse::lsh::HasherConfig;
use simreuse::reuse::ReuseStats;
use simreuse::stream::{analyze_similarity, gen_stream, FrameStream};
use simreuse::training::{
    evaluate, layer_similarity_profile, load_checkpoint, pretrain, sa_train, write_checkpoint,
    ArchSpec, Architecture, Checkpoint, EpochReport, EvalOptions, ToyModel,
};
use simreuse::tuner::{tune_model, ModelTuning};

use crate::config::{Loaded, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{csv_with_hash, OutDir};

pub const STREAM_FILE: &str = "stream.rfs";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const PROFILE_FILE: &str = "profile.json";
pub const TUNING_FILE: &str = "tuning.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.rfck";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_CSV: &str = "bench.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn load_stream(ld: &Loaded) -> CliResult<FrameStream> {
    let s = &ld.config.stream;
    if let Some(p) = &s.path {
        let path = ld.resolve(p);
        return FrameStream::load(&path).map_err(|e| CliError::from(e).at(&path));
    }
    let g = s.generate.as_ref().expect("validated stream section");
    let stream = gen_stream(
        g.n_frames,
        (g.height, g.width, g.channels),
        g.rho,
        g.n_classes,
        g.seed.unwrap_or(ld.config.seed),
    )?;
    Ok(if g.repeat > 1 {
        stream.duplicated(g.repeat)?
    } else {
        stream
    })
}

/// `tune` output: the per-layer results plus what they were tuned for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningFile {
    pub config_hash: String,
    pub architecture: Architecture,
    pub layer_names: Vec<String>,
    pub tuning: ModelTuning,
}

fn read_tuning(path: &Path) -> CliResult<TuningFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// The configured model: the checkpoint if one is given, else a fresh one
/// shaped after `stream`, with any hasher override applied.
pub fn load_model(ld: &Loaded, stream: &FrameStream) -> CliResult<ToyModel> {
    let m = &ld.config.model;
    let (h, w, c) = stream.shape();
    let mut model = match &m.checkpoint {
        Some(p) => {
            let path = ld.resolve(p);
            let model = load_checkpoint(&path)
                .map_err(|e| CliError::from(e).at(&path))?
                .model;
            check_model(&model, m.architecture, stream).map_err(|e| e.at(&path))?;
            model
        }
        None => {
            let spec = ArchSpec {
                architecture: m.architecture.unwrap_or(Architecture::TinyConvNet),
                height: h,
                width: w,
                channels: c,
                n_classes: stream.n_classes().max(2),
            };
            ToyModel::init(spec, m.init_seed.unwrap_or(ld.config.seed))?
        }
    };
    if let Some(hashers) = hasher_override(ld, &model)? {
        model.set_hashers(&hashers)?;
    }
    Ok(model)
}

fn check_model(
    model: &ToyModel,
    arch: Option<Architecture>,
    stream: &FrameStream,
) -> CliResult<()> {
    let s = model.spec();
    if arch.is_some_and(|a| a != s.architecture) {
        return Err(CliError::config(format!(
            "checkpoint holds a {:?}, config asks for {:?}",
            s.architecture,
            arch.unwrap()
        )));
    }
    if stream.shape() != (s.height, s.width, s.channels) {
        return Err(CliError::config(format!(
            "checkpoint expects {}x{}x{} frames, stream has {:?}",
            s.height,
            s.width,
            s.channels,
            stream.shape()
        )));
    }
    if stream.labels().is_some() && stream.n_classes() != s.n_classes {
        return Err(CliError::config(format!(
            "checkpoint has {} classes, stream has {}",
            s.n_classes,
            stream.n_classes()
        )));
    }
    Ok(())
}

fn hasher_override(ld: &Loaded, model: &ToyModel) -> CliResult<Option<Vec<HasherConfig>>> {
    let m = &ld.config.model;
    let spec = model.spec();
    if let Some(h) = &m.hashers {
        return Ok(Some(h.clone()));
    }
    if let Some(u) = m.uniform_hasher {
        return Ok(Some(
            spec.layer_row_dims()
                .iter()
                .enumerate()
                .map(|(l, &d)| HasherConfig {
                    input_dim: u.input_dim.map_or(d, |i| i.min(d)),
                    hash_size: u.hash_size,
                    seed: u.seed.unwrap_or(l as u64),
                })
                .collect(),
        ));
    }
    let Some(p) = &m.tuning else { return Ok(None) };
    let path = ld.resolve(p);
    let file = read_tuning(&path)?;
    let names = spec.layer_names();
    if file.architecture != spec.architecture || file.layer_names != names {
        return Err(CliError::config(format!(
            "{}: tuned for a {:?} with layers {:?}, model is a {:?} with layers {:?}",
            path.display(),
            file.architecture,
            file.layer_names,
            spec.architecture,
            names
        )));
    }
    for name in names {
        if !file.tuning.layers.contains_key(*name) {
            eprintln!(
                "warning: {} has no result for layer {name}; keeping its current hasher",
                path.display()
            );
        }
    }
    Ok(Some(file.tuning.hashers_for(model)))
}

pub fn cmd_gen(ld: &Loaded, out: &OutDir) -> CliResult<()> {
    if ld.config.stream.generate.is_none() {
        return Err(CliError::config("gen needs [stream.generate]"));
    }
    let stream = load_stream(ld)?;
    let mut bytes = Vec::new();
    stream.write(&mut bytes)?;
    out.write(STREAM_FILE, &bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub config_hash: String,
    pub n_frames: usize,
    pub mean_off_diagonal: f64,
    pub adjacent_mean: Option<f64>,
    pub distant_lag: usize,
    pub distant_mean: Option<f64>,
    pub profile: Option<Vec<LayerSimilarity>>,
}

pub fn cmd_analyze(ld: &Loaded, out: &OutDir) -> CliResult<()> {
    let cfg = &ld.config.analyze;
    let stream = load_stream(ld)?;
    let n = cfg
        .max_frames
        .map_or(stream.n_frames(), |m| m.min(stream.n_frames()));
    let stream = if n < stream.n_frames() {
        stream.slice(0, n)?
    } else {
        stream
    };
    let sim = analyze_similarity(&stream.to_matrix())?;
    let hash = ld.hash();
    let profile = if cfg.profile {
        let model = load_model(ld, &stream)?;
        let values = layer_similarity_profile(&model, &stream)?;
        Some(
            model
                .spec()
                .layer_names()
                .iter()
                .zip(values)
                .map(|(l, similarity)| LayerSimilarity {
                    layer: l.to_string(),
                    similarity,
                })
                .collect(),
        )
    } else {
        None
    };
    let report = AnalyzeReport {
        config_hash: hash.clone(),
        n_frames: n,
        mean_off_diagonal: sim.mean_off_diagonal(),
        adjacent_mean: sim.mean_at_lag(1),
        distant_lag: cfg.distant_lag,
        distant_mean: sim.mean_at_lag(cfg.distant_lag),
        profile,
    };
    let mut csv = format!("# config_hash: {hash}\n").into_bytes();
    csv.extend(sim.to_csv().into_bytes());
    out.write(SIMILARITY_FILE, &csv)?;
    out.write_json(PROFILE_FILE, &report)?;
    Ok(())
}

pub fn cmd_tune(ld: &Loaded, out: &OutDir) -> CliResult<()> {
    let stream = load_stream(ld)?;
    let model = load_model(ld, &stream)?;
    let t = &ld.config.tune;
    let tuning = tune_model(&model, &stream, &t.budget(), ld.config.seed, t.parallel)?;
    for (layer, e) in &tuning.failures {
        eprintln!("warning: tuning layer {layer} failed: {e}");
    }
    let spec = model.spec();
    out.write_json(
        TUNING_FILE,
        &TuningFile {
            config_hash: ld.hash(),
            architecture: spec.architecture,
            layer_names: spec.layer_names().iter().map(|s| s.to_string()).collect(),
            tuning,
        },
    )?;
    Ok(())
}

/// One JSONL row: the epoch report plus its phase and the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub phase: String,
    #[serde(flatten)]
    pub report: EpochReport,
}

pub fn cmd_train(ld: &Loaded, out: &OutDir) -> CliResult<Vec<ReportRow>> {
    let c = &ld.config;
    if c.train.pretrain_epochs == 0 && c.train.sa_epochs == 0 {
        return Err(CliError::config(
            "train needs pretrain_epochs or sa_epochs > 0",
        ));
    }
    let stream = load_stream(ld)?;
    let mut model = load_model(ld, &stream)?;
    let hash = ld.hash();
    let mut rows = Vec::new();
    let mut push = |phase: &str, reports: Vec<EpochReport>| {
        rows.extend(reports.into_iter().map(|report| ReportRow {
            config_hash: hash.clone(),
            phase: phase.to_string(),
            report,
        }))
    };
    if c.train.pretrain_epochs > 0 {
        let r = pretrain(
            &model,
            &stream,
            &c.train.config(c.train.pretrain_epochs, c.seed),
        )
        .map_err(|e| phase_error("pretrain", e))?;
        push("pretrain", r.reports);
        model = r.model;
    }
    if c.train.sa_epochs > 0 {
        let r = sa_train(
            &model,
            &stream,
            &c.train.config(c.train.sa_epochs, c.seed),
            &c.reg,
        )
        .map_err(|e| phase_error("sa", e))?;
        push("sa", r.reports);
        model = r.model;
    }
    let mut jsonl = Vec::new();
    for r in &rows {
        serde_json::to_writer(&mut jsonl, r).map_err(|e| CliError::Numeric(e.to_string()))?;
        jsonl.push(b'\n');
    }
    let mut ck = Vec::new();
    write_checkpoint(
        &mut ck,
        &Checkpoint {
            model,
            config_hash: Some(hash),
        },
    )?;
    out.write(REPORTS_FILE, &jsonl)?;
    out.write(CHECKPOINT_FILE, &ck)?;
    Ok(rows)
}

fn phase_error(phase: &str, e: simreuse::Error) -> CliError {
    match CliError::from(e) {
        CliError::Numeric(m) => CliError::Numeric(format!("{phase}: {m}")),
        other => other,
    }
}

/// One model's line of the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub metric_exact: f64,
    pub metric_reuse: f64,
    pub metric_quant: Option<f64>,
    pub task_loss_exact: f64,
    pub task_loss_reuse: f64,
    /// `macs_exact / macs_reuse` over all layers.
    pub speedup: f64,
    /// Arithmetic mean of the per-layer compression ratios.
    pub sigma_mean: f64,
    pub sigma_quant_mean: Option<f64>,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: String,
    pub stats: ReuseStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchModel {
    #[serde(flatten)]
    pub row: BenchRow,
    pub layers: Vec<LayerStats>,
    pub total: ReuseStats,
    pub quant_layers: Option<Vec<LayerStats>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub models: Vec<BenchModel>,
}

fn sigma_mean(layers: &[ReuseStats]) -> f64 {
    layers.iter().map(ReuseStats::sigma).sum::<f64>() / layers.len() as f64
}

fn named(model: &ToyModel, layers: &[ReuseStats]) -> Vec<LayerStats> {
    model
        .spec()
        .layer_names()
        .iter()
        .zip(layers)
        .map(|(l, s)| LayerStats {
            layer: l.to_string(),
            stats: *s,
        })
        .collect()
}

pub fn cmd_bench(ld: &Loaded, out: &OutDir) -> CliResult<BenchReport> {
    let b = &ld.config.bench;
    if b.checkpoints.is_empty() {
        return Err(CliError::config("bench.checkpoints is empty"));
    }
    let stream = load_stream(ld)?;
    let mut models = Vec::new();
    for p in &b.checkpoints {
        let mut sub = ld.clone();
        sub.config.model.checkpoint = Some(p.clone());
        let model = load_model(&sub, &stream)?;
        let opts = |use_reuse, quantize| EvalOptions {
            use_reuse,
            batch_size: b.batch_size,
            quantize,
            collect_mse: true,
        };
        let exact = evaluate(&model, &stream, &opts(false, false))?;
        let reuse = evaluate(&model, &stream, &opts(true, false))?;
        let quant = if b.quantize {
            Some(evaluate(&model, &stream, &opts(true, true))?)
        } else {
            None
        };
        models.push(BenchModel {
            row: BenchRow {
                model: p.display().to_string(),
                metric_exact: exact.metric,
                metric_reuse: reuse.metric,
                metric_quant: quant.as_ref().map(|q| q.metric),
                task_loss_exact: exact.task_loss,
                task_loss_reuse: reuse.task_loss,
                speedup: reuse.total.speedup(),
                sigma_mean: sigma_mean(&reuse.layers),
                sigma_quant_mean: quant.as_ref().map(|q| sigma_mean(&q.layers)),
                reduction_pct: reuse.total.reduction_pct(),
            },
            layers: named(&model, &reuse.layers),
            total: reuse.total,
            quant_layers: quant.as_ref().map(|q| named(&model, &q.layers)),
        });
    }
    let report = BenchReport {
        config_hash: ld.hash(),
        models,
    };
    let rows: Vec<&BenchRow> = report.models.iter().map(|m| &m.row).collect();
    out.write(BENCH_CSV, &csv_with_hash(&report.config_hash, &rows)?)?;
    out.write_json(BENCH_JSON, &report)?;
    Ok(report)
}

/// One sweep setting. Failed runs keep their error and leave the metrics
/// empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub window: usize,
    pub lambda_t: f64,
    pub final_metric: Option<f64>,
    pub final_sigma_mean: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub error: Option<String>,
}

/// Configuration of one sweep point: the sweep removed and the swept value
/// set, so running `train` on it standalone reproduces the point.
pub fn sweep_configs(c: &RunConfig) -> Vec<(String, RunConfig)> {
    let Some(s) = &c.sweep else { return Vec::new() };
    let mut base = c.clone();
    base.sweep = None;
    match (&s.window, &s.lambda_t) {
        (Some(ws), _) => ws
            .iter()
            .map(|&w| {
                let mut c = base.clone();
                c.reg.window = w;
                (format!("window-{w}"), c)
            })
            .collect(),
        (None, Some(ls)) => ls
            .iter()
            .map(|&l| {
                let mut c = base.clone();
                c.reg.lambda_t = l;
                (format!("lambda_t-{l}"), c)
            })
            .collect(),
        (None, None) => Vec::new(),
    }
}

pub fn cmd_sweep(ld: &Loaded, out: &OutDir) -> CliResult<Vec<SweepRow>> {
    let points = sweep_configs(&ld.config);
    if points.is_empty() {
        return Err(CliError::config("sweep needs a [sweep] section"));
    }
    let mut rows = Vec::new();
    for (run, config) in points {
        let sub = Loaded {
            config,
            base: ld.base.clone(),
        };
        let started = Instant::now();
        let result = sub
            .config
            .validate()
            .and_then(|_| out.sub(&run))
            .and_then(|dir| cmd_train(&sub, &dir).map(|r| (dir, r)));
        let mut row = SweepRow {
            run: run.clone(),
            window: sub.config.reg.window,
            lambda_t: sub.config.reg.lambda_t,
            final_metric: None,
            final_sigma_mean: None,
            final_task_loss: None,
            error: None,
        };
        match result {
            Ok((dir, reports)) => {
                let last = &reports.last().expect("at least one epoch report").report;
                row.final_metric = Some(last.accuracy);
                row.final_sigma_mean =
                    Some(last.sigma.iter().sum::<f64>() / last.sigma.len() as f64);
                row.final_task_loss = Some(last.task_loss);
                dir.write_timing("train", started.elapsed())?;
            }
            Err(e) => {
                eprintln!("warning: sweep run {run} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    out.write(SWEEP_FILE, &csv_with_hash(&ld.hash(), &rows)?)?;
    Ok(rows)
}
