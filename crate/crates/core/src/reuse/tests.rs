use super::*;
use crate::lsh::{cluster_rows, hashing_macs, LshHasher};
use crate::tensor::{im2col, matmul_exact, ConvShape, DenseMatrix, FeatureMap, Matrix, Real};
use crate::testutil::{normal_matrix, Counted};

/// Groups rows by code in first-occurrence order, independently of
/// `Clustering`.
fn oracle_groups(h: &LshHasher, rows: &[Vec<f64>]) -> (Vec<usize>, usize) {
    let mut seen: Vec<u64> = Vec::new();
    let ids = rows
        .iter()
        .map(|r| {
            let code = h.hash_row(r).unwrap();
            match seen.iter().position(|&c| c == code) {
                Some(p) => p,
                None => {
                    seen.push(code);
                    seen.len() - 1
                }
            }
        })
        .collect();
    (ids, seen.len())
}

fn oracle_means(rows: &[Vec<f64>], ids: &[usize], k: usize) -> Vec<Vec<f64>> {
    let cols = rows[0].len();
    let mut sums = vec![vec![0.0; cols]; k];
    let mut counts = vec![0usize; k];
    for (r, &id) in rows.iter().zip(ids) {
        counts[id] += 1;
        for (s, v) in sums[id].iter_mut().zip(r) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

fn naive_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn to_rows<T: Real>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.to_f64()).collect())
        .collect()
}

fn mse_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            s += (u - v) * (u - v);
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn duplicated_rows_lose_nothing() {
    let u = [0.7f32, -1.1, 0.4, 2.0];
    let v = [-0.3f32, 0.9, 1.5, -0.8];
    let rows: Vec<[f32; 4]> = (0..8).map(|i| if i % 2 == 0 { u } else { v }).collect();
    let x = DenseMatrix::from_rows(&rows).unwrap();
    let w = normal_matrix::<f32>(4, 3, 1);
    let h = LshHasher::new(4, 8, 7).unwrap();
    assert_ne!(h.hash_row(&u).unwrap(), h.hash_row(&v).unwrap());

    let (y, stats) = reuse_matmul(&x, &w, &h).unwrap();
    assert_eq!(y, matmul_exact(&x, &w).unwrap().0);
    assert_eq!(stats.sigma(), 4.0);
    assert_eq!(stats.recon_mse(), Some(0.0));
}

#[test]
fn single_cluster_outputs_mean_row_product() {
    let x = DenseMatrix::from_fn(6, 3, |i, j| if j == 0 { 1.0 + i as f32 } else { 2.0 });
    let w = normal_matrix::<f32>(3, 2, 4);
    // one projection bit on strictly positive rows can only produce one code
    let h = LshHasher::new(3, 1, 0).unwrap();
    let (y, stats) = reuse_matmul(&x, &w, &h).unwrap();
    if stats.sigma() == 6.0 {
        let mean = DenseMatrix::from_rows(&[[3.5f32, 2.0, 2.0]]).unwrap();
        let expected = mean.matmul(&w).unwrap();
        for r in y.row_iter() {
            for (a, b) in r.iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    let c = DenseMatrix::from_fn(5, 3, |_, _| -0.25);
    let (y, stats) = reuse_matmul(&c, &w, &LshHasher::new(3, 16, 2).unwrap()).unwrap();
    assert_eq!(stats.sigma(), 5.0);
    assert_eq!(y, c.matmul(&w).unwrap());
}

#[test]
fn recon_mse_matches_brute_force_oracle() {
    for seed in 0..5u64 {
        let x = normal_matrix::<f64>(32, 8, 100 + seed);
        let w = normal_matrix::<f64>(8, 4, 200 + seed);
        let h = LshHasher::new(8, 12, seed).unwrap();
        let (_, stats) = reuse_matmul(&x, &w, &h).unwrap();

        let xr = to_rows(&x);
        let wr = to_rows(&w);
        let (ids, k) = oracle_groups(&h, &xr);
        let means = oracle_means(&xr, &ids, k);
        let prod = naive_mul(&means, &wr);
        let reuse: Vec<Vec<f64>> = ids.iter().map(|&i| prod[i].clone()).collect();
        let exact = naive_mul(&xr, &wr);
        let expected = mse_rows(&reuse, &exact);
        let got = stats.recon_mse().unwrap();
        assert!(
            (got - expected).abs() <= 1e-9 * expected.max(1.0),
            "{got} vs {expected}"
        );
        assert_eq!(stats.clusters as usize, k);
    }
}

#[test]
fn no_compression_costs_more_and_is_exact() {
    let x = normal_matrix::<f32>(24, 10, 3);
    let w = normal_matrix::<f32>(10, 5, 4);
    let h = LshHasher::new(10, 64, 5).unwrap();
    let (y, stats) = reuse_matmul(&x, &w, &h).unwrap();
    assert_eq!(stats.sigma(), 1.0);
    assert!(stats.recon_mse().unwrap() <= 1e-10);
    assert!(stats.macs_reuse >= stats.macs_exact);
    assert!(stats.reduction_pct() <= 0.0);
    assert_eq!(y, x.matmul(&w).unwrap());
}

#[test]
fn mac_identity_against_counted_multiplies() {
    for (rows, cols, out, dim, bits, seed) in [
        (12, 6, 3, 4, 3, 1u64),
        (20, 9, 5, 9, 6, 2),
        (7, 16, 2, 5, 10, 3),
    ] {
        let x: Matrix<Counted> = normal_matrix(rows, cols, seed);
        let w: Matrix<Counted> = normal_matrix(cols, out, seed + 10);
        let h = LshHasher::new(dim, bits, seed).unwrap();
        Counted::reset();
        let (_, stats) = reuse_matmul_with(&x, &w, &h, &ReuseOptions::default()).unwrap();
        let counted = Counted::muls();
        let n_clusters = stats.clusters;
        let expected = n_clusters * (cols * out) as u64 + (rows * bits * dim) as u64;
        assert_eq!(stats.macs_reuse, expected);
        assert_eq!(counted, expected, "instrumented count");

        Counted::reset();
        let (_, macs) = matmul_exact(&x, &w).unwrap();
        assert_eq!(Counted::muls(), macs);
        assert_eq!(macs, stats.macs_exact);
    }
}

#[test]
fn more_bits_lower_mean_error() {
    let x = normal_matrix::<f32>(64, 12, 9);
    let w = normal_matrix::<f32>(12, 6, 10);
    let mean_mse = |bits: usize| {
        (0..20u64)
            .map(|s| {
                let h = LshHasher::new(12, bits, 1000 + s).unwrap();
                reuse_matmul(&x, &w, &h).unwrap().1.recon_mse().unwrap()
            })
            .sum::<f64>()
            / 20.0
    };
    let mut prev = f64::INFINITY;
    for bits in [1, 2, 4, 8, 16] {
        let m = mean_mse(bits);
        assert!(m <= prev, "{bits} bits: {m} > {prev}");
        prev = m;
    }
}

#[test]
fn conv_constant_input_single_cluster() {
    let x = FeatureMap::new(5, 4, 1, vec![1.5f32; 20]).unwrap();
    let shape = ConvShape::new(5, 4, 1, 1, 1, 1).unwrap();
    let filters = DenseMatrix::identity(1);
    let h = LshHasher::new(1, 4, 3).unwrap();
    let (y, stats) = reuse_conv(&x, &filters, &shape, &h).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.5));
    assert_eq!(stats.sigma(), 20.0);
}

#[test]
fn conv_shape_and_equivalence_with_lowered_matmul() {
    let data: Vec<f32> = normal_matrix::<f32>(1, 8 * 8 * 3, 5).into_vec();
    let x = FeatureMap::new(8, 8, 3, data).unwrap();
    let shape = ConvShape::new(8, 8, 3, 3, 3, 4).unwrap();
    let filters = normal_matrix::<f32>(27, 4, 6);
    let h = LshHasher::new(16, 10, 7).unwrap();
    let (y, stats) = reuse_conv(&x, &filters, &shape, &h).unwrap();
    assert_eq!((y.height(), y.width(), y.channels()), (6, 6, 4));

    let cols = im2col(&x, &shape).unwrap();
    let (exact, macs) = matmul_exact(&cols, &filters).unwrap();
    assert_eq!(macs, stats.macs_exact);
    let mse = y.to_matrix().mse(&exact).unwrap();
    assert!((mse - stats.recon_mse().unwrap()).abs() < 1e-9);

    let (lowered, lstats) = reuse_matmul(&cols, &filters, &h).unwrap();
    assert_eq!(lowered, y.to_matrix());
    assert_eq!(lstats, stats);

    let bad = normal_matrix::<f32>(26, 4, 6);
    assert!(reuse_conv(&x, &bad, &shape, &h).is_err());
}

fn random_weights<T: Real>(d: usize, heads: usize, dff: usize, seed: u64) -> AttentionWeights<T> {
    let dk = d / heads;
    let s = 1.0 / (d as f64).sqrt();
    let m = |r, c, k: u64| normal_matrix::<T>(r, c, seed * 100 + k).map(|v| v * T::from_f64(s));
    let hw = (0..heads as u64)
        .map(|i| HeadWeights {
            w_q: m(d, dk, 3 * i),
            w_k: m(d, dk, 3 * i + 1),
            w_v: m(d, dk, 3 * i + 2),
        })
        .collect();
    AttentionWeights::new(hw, m(d, d, 90), m(d, dff, 91), m(dff, d, 92)).unwrap()
}

#[test]
fn single_token_attends_to_itself() {
    let w = random_weights::<f64>(4, 2, 8, 1);
    let x = normal_matrix::<f64>(1, 4, 2);
    let y = exact_attention(&x, &w).unwrap();
    // softmax over one key is 1, so each head returns the token's V row
    let heads: Vec<Matrix<f64>> = w.heads.iter().map(|h| x.matmul(&h.w_v).unwrap()).collect();
    let z = Matrix::hstack(&heads.iter().collect::<Vec<_>>())
        .unwrap()
        .matmul(&w.w_o)
        .unwrap()
        .add(&x)
        .unwrap();
    let expected = relu(&z.matmul(&w.w_1).unwrap())
        .matmul(&w.w_2)
        .unwrap()
        .add(&z)
        .unwrap();
    assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
}

#[test]
fn zero_weights_pass_input_through() {
    let z = |r, c| Matrix::<f32>::zeros(r, c);
    let heads = vec![
        HeadWeights {
            w_q: z(4, 2),
            w_k: z(4, 2),
            w_v: z(4, 2),
        };
        2
    ];
    let w = AttentionWeights::new(heads, z(4, 4), z(4, 6), z(6, 4)).unwrap();
    let x = normal_matrix::<f32>(5, 4, 3);
    assert_eq!(exact_attention(&x, &w).unwrap(), x);
}

#[test]
fn three_token_block_matches_scripted_evaluation() {
    let x = [[1.0, -0.5], [0.2, 0.8], [-1.0, 0.3]];
    let wq = [[0.5, -0.2], [0.1, 0.4]];
    let wk = [[-0.3, 0.6], [0.7, 0.2]];
    let wv = [[0.9, -0.1], [0.3, 0.5]];
    let wo = [[1.0, 0.2], [-0.4, 0.6]];
    let w1 = [[0.5, -1.0, 0.3], [0.8, 0.1, -0.6]];
    let w2 = [[0.2, 0.4], [-0.5, 0.3], [0.7, -0.1]];

    // scripted evaluation, one scalar at a time
    let proj = |m: &[[f64; 2]; 2], t: usize, j: usize| x[t][0] * m[0][j] + x[t][1] * m[1][j];
    let mut z = [[0.0f64; 2]; 3];
    for t in 0..3 {
        let q = [proj(&wq, t, 0), proj(&wq, t, 1)];
        let mut scores = [0.0f64; 3];
        for (s, score) in scores.iter_mut().enumerate() {
            let k = [proj(&wk, s, 0), proj(&wk, s, 1)];
            *score = (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt();
        }
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut head = [0.0f64; 2];
        for s in 0..3 {
            for (j, hj) in head.iter_mut().enumerate() {
                *hj += e[s] / total * proj(&wv, s, j);
            }
        }
        for j in 0..2 {
            z[t][j] = head[0] * wo[0][j] + head[1] * wo[1][j] + x[t][j];
        }
    }
    let mut y = [[0.0f64; 2]; 3];
    for t in 0..3 {
        let mut hidden = [0.0f64; 3];
        for (f, hf) in hidden.iter_mut().enumerate() {
            *hf = (z[t][0] * w1[0][f] + z[t][1] * w1[1][f]).max(0.0);
        }
        for j in 0..2 {
            y[t][j] = z[t][j] + (0..3).map(|f| hidden[f] * w2[f][j]).sum::<f64>();
        }
    }

    let m = |rows: &[[f64; 2]]| Matrix::<f64>::from_rows(rows).unwrap();
    let w = AttentionWeights::new(
        vec![HeadWeights {
            w_q: m(&wq),
            w_k: m(&wk),
            w_v: m(&wv),
        }],
        m(&wo),
        Matrix::from_rows(&w1).unwrap(),
        Matrix::from_rows(&w2).unwrap(),
    )
    .unwrap();
    let got = exact_attention(&m(&x), &w).unwrap();
    assert!(got.max_abs_diff(&m(&y)).unwrap() < 1e-12);
}

#[test]
fn identical_tokens_reuse_is_exact() {
    let w = random_weights::<f32>(8, 2, 16, 3);
    let row = normal_matrix::<f32>(1, 8, 4);
    let x = Matrix::vstack(&vec![&row; 6]).unwrap();
    let h = LshHasher::new(4, 8, 1).unwrap();
    let (y, stats) = reuse_attention_with(&x, &w, &h, &h, &ReuseOptions::collecting()).unwrap();
    let exact = exact_attention(&x, &w).unwrap();
    assert!(y.max_abs_diff(&exact).unwrap() < 1e-6);
    for r in y.row_iter() {
        assert_eq!(r, y.row(0));
    }
    assert!(stats.q_sigma.iter().all(|&s| s == 6.0));
    assert!(stats.kv_sigma.iter().all(|&s| s == 6.0));
}

#[test]
fn full_resolution_hashing_reproduces_exact_block() {
    let w = random_weights::<f32>(8, 2, 16, 5);
    let x = normal_matrix::<f32>(12, 8, 6);
    let h = LshHasher::new(4, 64, 2).unwrap();
    let (y, stats) = reuse_attention_with(&x, &w, &h, &h, &ReuseOptions::collecting()).unwrap();
    assert_eq!(stats.total.sigma(), 1.0);
    assert!(y.max_abs_diff(&exact_attention(&x, &w).unwrap()).unwrap() < 1e-5);
    assert!(stats.total.macs_reuse > stats.total.macs_exact);
}

#[test]
fn duplicated_tokens_with_count_weighting_are_exact() {
    let w = random_weights::<f64>(8, 2, 16, 7);
    let a = normal_matrix::<f64>(1, 8, 8);
    let b = normal_matrix::<f64>(1, 8, 9);
    // unequal multiplicities: 3 × a, 5 × b
    let parts: Vec<&Matrix<f64>> = [&a, &b, &a, &b, &b, &a, &b, &b].to_vec();
    let x = Matrix::vstack(&parts).unwrap();
    let h = LshHasher::new(4, 64, 3).unwrap();
    let opts = ReuseOptions {
        collect_mse: true,
        count_weighted_attention: true,
    };
    let (y, stats) = reuse_attention_with(&x, &w, &h, &h, &opts).unwrap();
    assert_eq!(stats.total.sigma(), 4.0);
    assert!(y.max_abs_diff(&exact_attention(&x, &w).unwrap()).unwrap() < 1e-12);

    // without weighting, the 3:5 imbalance is lost
    let (y, _) = reuse_attention_with(&x, &w, &h, &h, &ReuseOptions::collecting()).unwrap();
    assert!(y.max_abs_diff(&exact_attention(&x, &w).unwrap()).unwrap() > 1e-6);
}

/// Staged oracle: clusters Q, [K|V] and Z with the hasher, one scalar loop at
/// a time, and returns the block output.
fn staged_oracle(
    x: &Matrix<f64>,
    w: &AttentionWeights<f64>,
    h_qkv: &LshHasher,
    h_mlp: &LshHasher,
) -> Vec<Vec<f64>> {
    let xr = to_rows(x);
    let n = xr.len();
    let dk = w.d_k();
    let mut concat = vec![Vec::new(); n];
    for head in &w.heads {
        let q = naive_mul(&xr, &to_rows(&head.w_q));
        let k = naive_mul(&xr, &to_rows(&head.w_k));
        let v = naive_mul(&xr, &to_rows(&head.w_v));
        let kv: Vec<Vec<f64>> = k
            .iter()
            .zip(&v)
            .map(|(a, b)| [a.clone(), b.clone()].concat())
            .collect();
        let (qid, nq) = oracle_groups(h_qkv, &q);
        let (kvid, nkv) = oracle_groups(h_qkv, &kv);
        let qc = oracle_means(&q, &qid, nq);
        let kvc = oracle_means(&kv, &kvid, nkv);
        let mut out_c = Vec::new();
        for qrow in &qc {
            let scores: Vec<f64> = kvc
                .iter()
                .map(|kvrow| (0..dk).map(|j| qrow[j] * kvrow[j]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            out_c.push(
                (0..dk)
                    .map(|j| kvc.iter().zip(&e).map(|(r, p)| p / total * r[dk + j]).sum())
                    .collect::<Vec<f64>>(),
            );
        }
        for (t, &id) in qid.iter().enumerate() {
            concat[t].extend_from_slice(&out_c[id]);
        }
    }
    let proj = naive_mul(&concat, &to_rows(&w.w_o));
    let z: Vec<Vec<f64>> = proj
        .iter()
        .zip(&xr)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect();
    let (zid, nz) = oracle_groups(h_mlp, &z);
    let zc = oracle_means(&z, &zid, nz);
    let hidden: Vec<Vec<f64>> = naive_mul(&zc, &to_rows(&w.w_1))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let mlp = naive_mul(&hidden, &to_rows(&w.w_2));
    zid.iter()
        .enumerate()
        .map(|(t, &id)| mlp[id].iter().zip(&z[t]).map(|(a, b)| a + b).collect())
        .collect()
}

#[test]
fn attention_recon_mse_matches_staged_oracle() {
    for seed in 0..4u64 {
        let w = random_weights::<f64>(8, 2, 16, 20 + seed);
        let x = normal_matrix::<f64>(16, 8, 30 + seed);
        let h_qkv = LshHasher::new(4, 3, seed).unwrap();
        let h_mlp = LshHasher::new(8, 4, 50 + seed).unwrap();
        let (y, stats) =
            reuse_attention_with(&x, &w, &h_qkv, &h_mlp, &ReuseOptions::collecting()).unwrap();
        let oracle = staged_oracle(&x, &w, &h_qkv, &h_mlp);
        let exact = to_rows(&exact_attention(&x, &w).unwrap());
        assert!(mse_rows(&to_rows(&y), &oracle) < 1e-20);
        let expected = mse_rows(&oracle, &exact);
        let got = stats.total.recon_mse().unwrap();
        assert!(
            (got - expected).abs() <= 1e-9 * expected.max(1e-3),
            "{got} vs {expected}"
        );
        assert!(stats.total.sigma() > 1.0);
    }
}

#[test]
fn attention_mac_accounting() {
    let (n, d, heads, dff) = (10usize, 8usize, 2usize, 12usize);
    let dk = d / heads;
    let w = random_weights::<f64>(d, heads, dff, 2);
    let x = normal_matrix::<f64>(n, d, 3);
    let h_qkv = LshHasher::new(3, 2, 1).unwrap();
    let h_mlp = LshHasher::new(5, 3, 2).unwrap();
    let (_, stats) =
        reuse_attention_with(&x, &w, &h_qkv, &h_mlp, &ReuseOptions::default()).unwrap();
    let exact = heads * (3 * n * d * dk + 2 * n * n * dk) + n * d * d + 2 * n * d * dff;
    assert_eq!(stats.total.macs_exact, exact as u64);
    let q = x.matmul(&w.heads[0].w_q).unwrap();
    let nq0 = cluster_rows(&h_qkv, &q).unwrap().n_clusters();
    assert!(nq0 as f64 == n as f64 / stats.q_sigma[0]);
    let hashing = 2 * heads as u64 * hashing_macs(&h_qkv, n) + hashing_macs(&h_mlp, n);
    assert!(stats.total.macs_reuse > hashing);
}

#[test]
fn quantization_examples() {
    let q = quantize_8bit(&DenseMatrix::zeros(3, 2));
    assert_eq!(q.scale, 1.0);
    assert!(q.codes.iter().all(|&c| c == 0));

    let m = DenseMatrix::from_rows(&[[0.5f32, -2.0, 1.0], [2.0, 0.0, -0.3]]).unwrap();
    let q = quantize_8bit(&m);
    assert_eq!(q.codes[1], -127);
    assert_eq!(q.codes[3], 127);

    let r = normal_matrix::<f32>(40, 13, 8);
    let q = quantize_8bit(&r);
    let back = q.dequantize();
    assert!(r.max_abs_diff(&back).unwrap() <= q.scale as f64 / 2.0 + 1e-6);
}

#[test]
fn quantization_snaps_near_duplicates() {
    // one large row fixes scale = 0.01; the rest sit within scale/2 of zero
    let mut rows = vec![vec![1.27f32, 0.0, 0.0, 0.0]];
    let noise = normal_matrix::<f32>(15, 4, 11);
    for r in noise.row_iter() {
        rows.push(r.iter().map(|v| v * 0.001).collect());
    }
    let x = DenseMatrix::from_rows(&rows).unwrap();
    let w = normal_matrix::<f32>(4, 2, 12);
    let h = LshHasher::new(4, 16, 13).unwrap();
    let (_, float_stats) = reuse_matmul(&x, &w, &h).unwrap();
    let (_, quant_stats) = reuse_matmul_quantized(&x, &w, &h).unwrap();
    assert!(quant_stats.sigma() > float_stats.sigma());
    assert_eq!(quant_stats.clusters, 2);

    let (_, zero_stats) = reuse_matmul_quantized(&DenseMatrix::zeros(9, 4), &w, &h).unwrap();
    assert_eq!(zero_stats.clusters, 1);
}
