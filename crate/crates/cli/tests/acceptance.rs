//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the lines always reach the
//! output. Criteria listed in `KNOWN_FAILURES` fail on this implementation
//! for reasons documented in the README; the run exits nonzero if any other
//! criterion fails, or if a known failure starts passing.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use simreuse::lsh::{cluster_rows, HasherConfig, LshHasher};
use simreuse::regularizers::{
    inter_frame_reg, intra_frame_reg, kl_divergence, FeatureMapSet, MeanMode, RegConfig,
    RunningMeans,
};
use simreuse::reuse::{
    reuse_attention_with, reuse_conv, reuse_matmul, AttentionWeights, HeadWeights, ReuseOptions,
};
use simreuse::stream::{gen_stream, FrameStream};
use simreuse::tensor::{matmul_exact, ConvShape, FeatureMap, Matrix};
use simreuse::training::{
    calibrate, composite_loss, evaluate, layer_inputs, pretrain, sa_train, ArchSpec, Architecture,
    EvalOptions, RegState, ToyModel, TrainConfig,
};
use simreuse::tuner::{
    ei_closed_form, layer_oracles, random_search, tune_layer, GpPosterior, TuneBudget,
};

const KNOWN_FAILURES: &[usize] = &[5, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(usize, &str, u64, fn() -> Outcome)> = vec![
        (
            1,
            "oracle equivalence under duplication",
            10,
            c1_oracle_equivalence,
        ),
        (
            2,
            "composite-loss gradient vs finite differences",
            120,
            c2_gradients,
        ),
        (
            3,
            "compression after similarity-aware training",
            900,
            c3_compression,
        ),
        (4, "MAC-count speedup", 900, c4_speedup),
        (5, "quantization raises compression", 300, c5_quantization),
        (6, "tuner efficacy", 600, c6_tuner),
        (7, "regularizer axioms", 60, c7_regularizers),
        (8, "similarity reproduction", 300, c8_similarity),
        (9, "CLI determinism", 600, c9_determinism),
        (10, "reduction to plain training", 120, c10_reduction),
    ];
    let mut failed = BTreeSet::new();
    for (n, name, budget, f) in criteria {
        let started = Instant::now();
        let mut o = f();
        let elapsed = started.elapsed();
        if elapsed > Duration::from_secs(budget) {
            o.pass = false;
            o.detail.push_str(&format!("; over the {budget} s budget"));
        }
        if !o.pass {
            failed.insert(n);
        }
        println!(
            "criterion {n:>2} {} {name} ({:.1} s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            o.detail
        );
    }
    let known: BTreeSet<usize> = KNOWN_FAILURES.iter().copied().collect();
    let unexpected: Vec<_> = failed.difference(&known).collect();
    let fixed: Vec<_> = known.difference(&failed).collect();
    println!(
        "acceptance: {} of 10 pass; known failures {:?}",
        10 - failed.len(),
        KNOWN_FAILURES
    );
    if !unexpected.is_empty() || !fixed.is_empty() {
        println!(
            "acceptance: unexpected failures {unexpected:?}, known failures now passing {fixed:?}"
        );
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- oracles

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        // Box-Muller keeps the oracle free of the crate's own sampling
        let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

fn naive_matmul(x: &Matrix<f64>, w: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(x.rows(), w.cols(), |i, j| {
        (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum()
    })
}

fn max_abs(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Stride-1 unpadded convolution; filter rows run over kernel row, kernel
/// column, then channel.
fn naive_conv(x: &FeatureMap<f64>, w: &Matrix<f64>, k: usize) -> Matrix<f64> {
    let (oh, ow, c) = (x.height() - k + 1, x.width() - k + 1, x.channels());
    Matrix::from_fn(oh * ow, w.cols(), |p, f| {
        let (i, j) = (p / ow, p % ow);
        let mut s = 0.0;
        for r in 0..k {
            for q in 0..k {
                for ch in 0..c {
                    s += x.at(i + r, j + q, ch) * w.get((r * k + q) * c + ch, f);
                }
            }
        }
        s
    })
}

fn naive_block(x: &Matrix<f64>, w: &AttentionWeights<f64>) -> Matrix<f64> {
    let n = x.rows();
    let mut heads = Vec::new();
    for h in &w.heads {
        let (q, k, v) = (
            naive_matmul(x, &h.w_q),
            naive_matmul(x, &h.w_k),
            naive_matmul(x, &h.w_v),
        );
        let dk = q.cols() as f64;
        let out = Matrix::from_fn(n, v.cols(), |i, c| {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    (0..q.cols())
                        .map(|t| q.get(i, t) * k.get(j, t))
                        .sum::<f64>()
                        / dk.sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..n).map(|j| e[j] / z * v.get(j, c)).sum()
        });
        heads.push(out);
    }
    let dh = heads[0].cols();
    let concat = Matrix::from_fn(n, dh * heads.len(), |i, c| heads[c / dh].get(i, c % dh));
    let proj = naive_matmul(&concat, &w.w_o);
    let z = Matrix::from_fn(n, x.cols(), |i, c| proj.get(i, c) + x.get(i, c));
    let hidden = naive_matmul(&z, &w.w_1);
    let hidden = Matrix::from_fn(hidden.rows(), hidden.cols(), |i, c| {
        hidden.get(i, c).max(0.0)
    });
    let mlp = naive_matmul(&hidden, &w.w_2);
    Matrix::from_fn(n, x.cols(), |i, c| mlp.get(i, c) + z.get(i, c))
}

/// `distinct` rows repeated `k` times each, in shuffled order.
fn duplicated(distinct: &Matrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    repeated(distinct, &vec![k; distinct.rows()], rng)
}

/// Row `i` of `distinct` repeated `counts[i]` times, in shuffled order.
fn repeated(distinct: &Matrix<f64>, counts: &[usize], rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let mut order: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &k)| std::iter::repeat_n(i, k))
        .collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Matrix::from_fn(order.len(), distinct.cols(), |i, j| {
        distinct.get(order[i], j)
    })
}

fn c1_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for trial in 0..5u64 {
        // matmul
        let x = duplicated(&normal(12, 20, &mut rng), 4, &mut rng);
        let w = normal(20, 7, &mut rng);
        let h = LshHasher::new(20, 64, trial).unwrap();
        if cluster_rows(&h, &x).unwrap().n_clusters() != 12 {
            return outcome(
                false,
                format!("trial {trial}: distinct matmul rows share a code"),
            );
        }
        let (y, _) = reuse_matmul(&x, &w, &h).unwrap();
        worst = worst.max(max_abs(&y, &naive_matmul(&x, &w)));
        // production precision against the exact kernel in the same precision
        let (x32, w32) = (x.cast::<f32>(), w.cast::<f32>());
        let (y32, _) = reuse_matmul(&x32, &w32, &h).unwrap();
        worst = worst.max(max_abs(
            &y32.cast(),
            &matmul_exact(&x32, &w32).unwrap().0.cast(),
        ));

        // conv on a periodic frame, so patches repeat
        let tile = normal(6, 3, &mut rng);
        let fm = FeatureMap::new(
            10,
            10,
            3,
            (0..10 * 10)
                .flat_map(|p| {
                    let (i, j) = (p / 10, p % 10);
                    let t = (i % 2) * 3 + j % 3;
                    (0..3).map(move |c| (t, c))
                })
                .map(|(t, c)| tile.get(t, c))
                .collect(),
        )
        .unwrap();
        let filters = normal(27, 4, &mut rng);
        let shape = ConvShape::new(10, 10, 3, 3, 3, 4).unwrap();
        let h = LshHasher::new(27, 64, 10 + trial).unwrap();
        let (out, stats) = reuse_conv(&fm, &filters, &shape, &h).unwrap();
        if stats.clusters != 6 {
            return outcome(
                false,
                format!(
                    "trial {trial}: conv produced {} clusters, expected 6",
                    stats.clusters
                ),
            );
        }
        worst = worst.max(max_abs(&out.to_matrix(), &naive_conv(&fm, &filters, 3)));

        // attention block with repeated tokens
        let d = 8;
        let weights = AttentionWeights::new(
            (0..2)
                .map(|_| HeadWeights {
                    w_q: normal(d, 4, &mut rng),
                    w_k: normal(d, 4, &mut rng),
                    w_v: normal(d, 4, &mut rng),
                })
                .collect(),
            normal(8, d, &mut rng),
            normal(d, 16, &mut rng),
            normal(16, d, &mut rng),
        )
        .unwrap();
        // uneven multiplicities, so plain softmax over centroids would be off
        let x = repeated(&normal(5, d, &mut rng), &[1, 2, 3, 4, 5], &mut rng);
        let (hq, hm) = (
            LshHasher::new(4, 64, 20 + trial).unwrap(),
            LshHasher::new(d, 64, 30 + trial).unwrap(),
        );
        let weighted = ReuseOptions {
            collect_mse: true,
            count_weighted_attention: true,
        };
        let (y, st) = reuse_attention_with(&x, &weights, &hq, &hm, &weighted).unwrap();
        if st.q_sigma.iter().chain(&st.kv_sigma).any(|&s| s != 3.0) || st.mlp_sigma != 3.0 {
            return outcome(
                false,
                format!("trial {trial}: distinct tokens share an attention code"),
            );
        }
        let oracle = naive_block(&x, &weights);
        worst = worst.max(max_abs(&y, &oracle));
        if trial == 0 {
            let (plain, _) =
                reuse_attention_with(&x, &weights, &hq, &hm, &ReuseOptions::default()).unwrap();
            notes.push(format!(
                "attention with member-count weighting; unweighted centroid attention deviates by {:.2e}",
                max_abs(&plain, &oracle)
            ));
        }
    }
    outcome(
        worst <= 1e-6,
        format!(
            "max |reuse - oracle| = {worst:.2e} over 5 trials; {}",
            notes.join("")
        ),
    )
}

// ------------------------------------------------------------- gradients

fn random_means(n: usize, pool: usize, rng: &mut ChaCha8Rng) -> RunningMeans {
    let means = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..pool).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    RunningMeans::from_distributions(means, MeanMode::Cumulative).unwrap()
}

fn fd_relative_error(spec: ArchSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = gen_stream(
        2,
        (spec.height, spec.width, spec.channels),
        0.9,
        spec.n_classes,
        seed,
    )
    .unwrap();
    let mut model = ToyModel::init(spec, seed + 100).unwrap();
    let hashers: Vec<HasherConfig> = spec
        .layer_row_dims()
        .iter()
        .enumerate()
        .map(|(l, &d)| HasherConfig {
            input_dim: d.min(rng.random_range(2..6)),
            hash_size: rng.random_range(2..5),
            seed: seed * 10 + l as u64,
        })
        .collect();
    model.set_hashers(&hashers).unwrap();
    let plan = calibrate(&model, &data, 0..2).unwrap();
    let reg = RegConfig {
        lambda: rng.random_range(0.1..1.0),
        lambda_t: rng.random_range(0.1..1.0),
        pool_len: 4 + rng.random_range(0..8),
        ..RegConfig::default()
    };
    let means = random_means(spec.feature_names().len(), reg.pool_len, &mut rng);
    let state = || {
        Some(RegState {
            config: &reg,
            means: &means,
        })
    };
    let params: Vec<Matrix<f64>> = model.params().iter().map(Matrix::cast).collect();
    let loss =
        |p: &[Matrix<f64>]| composite_loss(&model, p, &data, 0..2, Some(&plan), state()).unwrap();
    let (_, grads) = loss(&params);
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (pi, p) in params.iter().enumerate() {
        for _ in 0..4 {
            let idx = rng.random_range(0..p.data().len());
            let shifted = |delta: f64| {
                let mut ps = params.clone();
                let mut d = p.data().to_vec();
                d[idx] += delta;
                ps[pi] = Matrix::new(p.rows(), p.cols(), d).unwrap();
                loss(&ps).0
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            diff += (fd - grads[pi].data()[idx]).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt()
}

fn c2_gradients() -> Outcome {
    let conv = ArchSpec {
        architecture: Architecture::TinyConvNet,
        height: 6,
        width: 6,
        channels: 2,
        n_classes: 3,
    };
    let vit = ArchSpec {
        architecture: Architecture::TinyVit,
        height: 8,
        width: 8,
        channels: 1,
        n_classes: 3,
    };
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for seed in 0..11 {
        for spec in [conv, vit] {
            worst = worst.max(fd_relative_error(spec, 500 + seed));
            n += 1;
        }
    }
    outcome(
        worst <= 1e-3,
        format!("{n} frozen configurations, worst relative error {worst:.2e}"),
    )
}

// ------------------------------------------------------ compression runs

struct SeedRun {
    pre_exact: f64,
    pre_reduction: f64,
    sa_exact: f64,
    sa_reuse: f64,
    sa_reduction: f64,
    sa_speedup: f64,
}

fn demo_spec() -> ArchSpec {
    ArchSpec {
        architecture: Architecture::TinyConvNet,
        height: 16,
        width: 16,
        channels: 3,
        n_classes: 4,
    }
}

fn compression_runs() -> &'static Vec<SeedRun> {
    static RUNS: std::sync::OnceLock<Vec<SeedRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        (0..3u64)
            .map(|seed| {
                let shape = (16, 16, 3);
                let train = gen_stream(256, shape, 0.95, 4, seed).unwrap();
                let test = gen_stream(128, shape, 0.95, 4, seed + 1000).unwrap();
                let cfg = TrainConfig {
                    epochs: 10,
                    seed,
                    ..TrainConfig::default()
                };
                let pre = pretrain(&ToyModel::init(demo_spec(), seed).unwrap(), &train, &cfg)
                    .unwrap()
                    .model;
                let reg = RegConfig {
                    lambda: 0.001,
                    ..RegConfig::default()
                };
                let sa = sa_train(&pre, &train, &cfg, &reg).unwrap().model;
                let exact = EvalOptions {
                    use_reuse: false,
                    ..EvalOptions::default()
                };
                let reuse = EvalOptions::default();
                let pre_r = evaluate(&pre, &test, &reuse).unwrap();
                let sa_r = evaluate(&sa, &test, &reuse).unwrap();
                SeedRun {
                    pre_exact: evaluate(&pre, &test, &exact).unwrap().metric,
                    pre_reduction: pre_r.total.reduction_pct(),
                    sa_exact: evaluate(&sa, &test, &exact).unwrap().metric,
                    sa_reuse: sa_r.metric,
                    sa_reduction: sa_r.total.reduction_pct(),
                    sa_speedup: sa_r.total.speedup(),
                }
            })
            .collect()
    })
}

fn c3_compression() -> Outcome {
    let runs = compression_runs();
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        // one point of accuracy, against the model's own exact eval and the
        // pre-trained model's
        let degradation = (r.sa_exact - r.sa_reuse).max(r.pre_exact - r.sa_reuse);
        let seed_ok =
            r.sa_reduction >= 30.0 && degradation <= 0.01 && r.sa_reduction > r.pre_reduction;
        ok &= seed_ok;
        parts.push(format!(
            "seed {seed}: reduction {:.2}% (pre {:.2}%), degradation {:.3}",
            r.sa_reduction, r.pre_reduction, degradation
        ));
    }
    let mean = runs.iter().map(|r| r.sa_reduction).sum::<f64>() / runs.len() as f64;
    outcome(
        ok && mean >= 30.0,
        format!("mean reduction {mean:.2}%; {}", parts.join("; ")),
    )
}

fn c4_speedup() -> Outcome {
    let runs = compression_runs();
    let speedups: Vec<f64> = runs.iter().map(|r| r.sa_speedup).collect();
    let hits = speedups.iter().filter(|&&s| s >= 1.3).count();
    outcome(
        hits >= 2,
        format!("speedups {speedups:.3?}; {hits} of 3 at least 1.3"),
    )
}

// ----------------------------------------------------------- quantization

/// One-sided sign-test p-value for `pos` successes among `n` untied pairs.
fn sign_test(pos: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |c, i| c * (n - i) as f64 / (i + 1) as f64);
    (pos..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn c5_quantization() -> Outcome {
    let shape = (16, 16, 3);
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let model = pretrain(
        &ToyModel::init(demo_spec(), 0).unwrap(),
        &gen_stream(256, shape, 0.95, 4, 0).unwrap(),
        &cfg,
    )
    .unwrap()
    .model;
    let (mut pos, mut neg) = (0, 0);
    for seed in 0..10u64 {
        let s = gen_stream(64, shape, 0.99, 4, 100 + seed).unwrap();
        let float = evaluate(&model, &s, &EvalOptions::default())
            .unwrap()
            .total
            .sigma();
        let quant = evaluate(
            &model,
            &s,
            &EvalOptions {
                quantize: true,
                ..EvalOptions::default()
            },
        )
        .unwrap()
        .total
        .sigma();
        if quant > float {
            pos += 1;
        } else if quant < float {
            neg += 1;
        }
    }
    let p = sign_test(pos, pos + neg);
    outcome(
        p < 0.05,
        format!(
            "quantized sigma higher on {pos}, lower on {neg}, tied on {} of 10 seeds; p = {p:.3}",
            10 - pos - neg
        ),
    )
}

// ------------------------------------------------------------------ tuner

fn c6_tuner() -> Outcome {
    let budget = TuneBudget::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let model = ToyModel::init(demo_spec(), seed).unwrap();
        let stream = gen_stream(8, (16, 16, 3), 0.95, 4, seed).unwrap();
        // conv2's input rows: the correlated calibration batch
        let x = &layer_inputs(&model, &stream, 0..8).unwrap()[1];
        let oracle = &layer_oracles(&model).unwrap()[1];
        let bo = tune_layer(oracle.as_ref(), x, &budget, seed)
            .unwrap()
            .best
            .theta;
        let mut rs: Vec<f64> = (0..11)
            .map(|r| {
                random_search(oracle.as_ref(), x, &budget, 1000 * seed + r)
                    .unwrap()
                    .best
                    .theta
            })
            .collect();
        rs.sort_by(f64::total_cmp);
        ok &= bo <= rs[5];
        parts.push(format!("seed {seed}: {bo:.3e} vs median {:.3e}", rs[5]));
    }

    let ei = ei_closed_form(0.0, 1.0, 0.0);
    let ei_ok = (ei - 0.39894).abs() <= 1e-4;

    let xs: Vec<[f64; 2]> = (0..8)
        .map(|i| [i as f64 / 7.0, ((i * 3) % 8) as f64 / 7.0])
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| (3.0 * x[0]).sin() + x[1] * x[1])
        .collect();
    let post = GpPosterior::fit(&xs, &ys).unwrap();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    let (mut err, mut pvar): (f64, f64) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let (m, v) = post.predict(x);
        err = err.max((m - y).abs());
        pvar = pvar.max(v);
    }
    let gp_ok = err <= 1e-3 * var.sqrt() && pvar <= 1e-3 * var;
    outcome(
        ok && ei_ok && gp_ok,
        format!(
            "{}; EI(0, 1, 0) = {ei:.5}; GP interpolation error {err:.1e}, variance {pvar:.1e}",
            parts.join("; ")
        ),
    )
}

// ------------------------------------------------------------ regularizers

fn c7_regularizers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let maps = |rng: &mut ChaCha8Rng, frame| {
        FeatureMapSet::new(
            frame,
            (0..3)
                .map(|l| {
                    (0..20 + 7 * l)
                        .map(|_| rng.random_range(-2.0f32..2.0))
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = maps(&mut rng, 4);
        let means = RunningMeans::from_frame(&a, 8, MeanMode::Cumulative).unwrap();
        worst = worst.max(intra_frame_reg(&a, &means).unwrap().0.abs());
        let same = FeatureMapSet::new(5, a.maps.clone()).unwrap();
        let cfg = RegConfig {
            pool_len: 8,
            ..RegConfig::default()
        };
        worst = worst.max(inter_frame_reg(&a, &same, &cfg).unwrap().0.abs());
        // zero pair weights switch the inter-frame term off
        let b = maps(&mut rng, 5);
        let off = RegConfig {
            pair_weights: Some(vec![vec![0.0; 3]; 3]),
            ..cfg
        };
        worst = worst.max(inter_frame_reg(&a, &b, &off).unwrap().0.abs());
    }

    // zero lambdas leave the composite loss at the task loss
    let spec = ArchSpec {
        architecture: Architecture::TinyConvNet,
        height: 6,
        width: 6,
        channels: 1,
        n_classes: 2,
    };
    let model = ToyModel::init(spec, 3).unwrap();
    let data = gen_stream(4, (6, 6, 1), 0.9, 2, 3).unwrap();
    let zero = RegConfig {
        lambda: 0.0,
        lambda_t: 0.0,
        pool_len: 8,
        ..RegConfig::default()
    };
    let means = random_means(spec.feature_names().len(), 8, &mut rng);
    let params: Vec<Matrix<f64>> = model.params().iter().map(Matrix::cast).collect();
    let with = composite_loss(
        &model,
        &params,
        &data,
        0..4,
        None,
        Some(RegState {
            config: &zero,
            means: &means,
        }),
    )
    .unwrap()
    .0;
    let without = composite_loss(&model, &params, &data, 0..4, None, None)
        .unwrap()
        .0;
    worst = worst.max((with - without).abs());

    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let n = rng.random_range(1..40);
        let dist = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0.0..1.0f64).powi(3))
                .collect();
            let s: f64 = raw.iter().sum::<f64>().max(1e-300);
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let (p, q) = (dist(&mut rng), dist(&mut rng));
        min_kl = min_kl.min(kl_divergence(&p, &q).unwrap());
    }
    outcome(
        worst <= 1e-6 && min_kl >= 0.0,
        format!("largest zero-case term {worst:.1e}; smallest KL over 10^4 pairs {min_kl:.2e}"),
    )
}

// ------------------------------------------------------------------- CLI

fn simreuse(verb: &str, config: &Path, out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_simreuse"))
        .args([verb, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{verb}: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

fn stream_toml(n: usize, rho: f64, seed: u64) -> String {
    format!(
        "[stream.generate]\nn_frames = {n}\nheight = 16\nwidth = 16\nchannels = 3\nrho = {rho}\nn_classes = 4\nseed = {seed}\n"
    )
}

fn c8_similarity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (mut ordered, mut decreasing) = (0, 0);
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let cfg = dir.path().join(format!("a{seed}.toml"));
        std::fs::write(
            &cfg,
            format!(
                "schema_version = 1\nseed = {seed}\n{}",
                stream_toml(64, 0.9, 200 + seed)
            ),
        )
        .unwrap();
        let out = dir.path().join(format!("out{seed}"));
        if let Err(e) = simreuse("analyze", &cfg, &out) {
            return outcome(false, e);
        }
        let r: Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("profile.json")).unwrap())
                .unwrap();
        let (adj, far) = (
            r["adjacent_mean"].as_f64().unwrap(),
            r["distant_mean"].as_f64().unwrap(),
        );
        let profile: Vec<f64> = r["profile"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["similarity"].as_f64().unwrap())
            .collect();
        ordered += usize::from(adj > far);
        decreasing += usize::from(profile.windows(2).all(|w| w[1] < w[0]));
        parts.push(format!(
            "seed {seed}: adjacent {adj:.3} vs lag-10 {far:.3}, layers {profile:.3?}"
        ));
    }
    outcome(
        ordered == 3 && decreasing >= 2,
        format!(
            "adjacent > distant on {ordered}/3, similarity decreasing with depth on {decreasing}/3; {}",
            parts.join("; ")
        ),
    )
}

/// Every file under `dir` except timing records, by relative path.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.json" {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = format!(
        "schema_version = 1\nseed = 5\n[train]\npretrain_epochs = 3\nsa_epochs = 2\n[reg]\nlambda_t = 0.01\n[tune]\nn_total = 12\n[sweep]\nwindow = [1, 2]\n{}",
        stream_toml(48, 0.95, 5)
    );
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, &base).unwrap();
    let bench = dir.path().join("bench.toml");
    std::fs::write(
        &bench,
        format!(
            "schema_version = 1\nseed = 6\n[bench]\ncheckpoints = [\"model/checkpoint.rfck\"]\nquantize = true\n{}",
            stream_toml(32, 0.95, 6)
        ),
    )
    .unwrap();
    if let Err(e) = simreuse("train", &cfg, &dir.path().join("model")) {
        return outcome(false, e);
    }
    let mut checked = Vec::new();
    for verb in ["gen", "analyze", "tune", "train", "bench", "sweep"] {
        let config = if verb == "bench" { &bench } else { &cfg };
        let (a, b) = (
            dir.path().join(format!("{verb}-a")),
            dir.path().join(format!("{verb}-b")),
        );
        for out in [&a, &b] {
            if let Err(e) = simreuse(verb, config, out) {
                return outcome(false, e);
            }
        }
        let (fa, fb) = (outputs(&a), outputs(&b));
        if fa.is_empty() || fa != fb {
            return outcome(
                false,
                format!("{verb}: outputs differ between identical runs"),
            );
        }
        checked.push(format!("{verb} ({} files)", fa.len()));
    }
    outcome(
        true,
        format!("byte-identical reruns: {}", checked.join(", ")),
    )
}

// --------------------------------------------------------------- baseline

fn c10_reduction() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (arch, shape) in [
        (Architecture::TinyConvNet, (8, 8, 2)),
        (Architecture::TinyVit, (8, 8, 1)),
    ] {
        let spec = ArchSpec {
            architecture: arch,
            height: shape.0,
            width: shape.1,
            channels: shape.2,
            n_classes: 3,
        };
        let data: FrameStream = gen_stream(48, shape, 0.9, 3, 10).unwrap();
        let model = ToyModel::init(spec, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            seed: 12,
            reuse_in_training: false,
            ..TrainConfig::default()
        };
        let zero = RegConfig {
            lambda: 0.0,
            lambda_t: 0.0,
            ..RegConfig::default()
        };
        let plain = pretrain(&model, &data, &cfg).unwrap();
        let sa = sa_train(&model, &data, &cfg, &zero).unwrap();
        let same_losses = plain.reports.iter().zip(&sa.reports).all(|(a, b)| {
            a.task_loss.to_bits() == b.task_loss.to_bits()
                && a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.accuracy.to_bits() == b.accuracy.to_bits()
        });
        let same =
            same_losses && plain.reports.len() == sa.reports.len() && plain.model == sa.model;
        ok &= same;
        parts.push(format!(
            "{arch:?}: {}",
            if same { "bit-identical" } else { "differs" }
        ));
    }
    outcome(ok, parts.join(", "))
}
