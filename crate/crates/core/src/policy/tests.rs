use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracle::{Oracle, QueryContext, SyntheticConfig, SyntheticOracle};

fn small_config() -> PolicyConfig {
    PolicyConfig {
        kind: PolicyKind::Transformer,
        k: 5,
        d_model: 8,
        n_heads: 2,
        ff_dim: 12,
        max_rounds: 3,
        focus_prior: false,
    }
}

fn plain_mlp(hidden: usize) -> PolicyConfig {
    PolicyConfig {
        focus_prior: false,
        ..PolicyConfig::mlp(5, hidden, 3)
    }
}

fn history(k: usize, rounds: usize, seed: u64) -> EncodingHistory {
    let oracle = SyntheticOracle::new(SyntheticConfig {
        k,
        temperature: 0.5,
        ..SyntheticConfig::default()
    });
    let ctx = QueryContext::new("q", k, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = EncodingHistory::new();
    for _ in 0..rounds {
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let sigma = Ranking::new(order).unwrap();
        let s = oracle.encode(&ctx, &sigma).unwrap();
        h.push(sigma, s);
    }
    h
}

fn params(cfg: PolicyConfig, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // spread the layer-norm parameters so every gradient path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for seg in p.layout().segments().to_vec() {
        if matches!(seg.role, layout::Role::Gain | layout::Role::Bias) {
            for v in &mut p.values[seg.range()] {
                *v += 0.3 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
            }
        }
    }
    p
}

#[test]
fn scores_are_a_distribution() {
    let p = params(small_config(), 3);
    let s = p.scores(&history(5, 2, 1), 0).unwrap();
    assert_eq!(s.probs.len(), 5);
    assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(s.probs.iter().all(|&x| x >= 0.0));
}

#[test]
fn focus_prior_adds_the_log_rejection_row() {
    for cfg in [
        PolicyConfig { focus_prior: true, ..small_config() },
        PolicyConfig::mlp(5, 7, 3),
    ] {
        let mut p = params(cfg, 4);
        p.segment_mut("out_w").fill(0.0);
        p.segment_mut("out_b").fill(0.0);
        let h = history(5, 3, 2);
        let s = p.scores(&h, 2).unwrap();
        assert_eq!(s.logits, focus_prior(h.last().unwrap().1.row(2)));
    }
}

#[test]
fn row_features_are_centred_log_probabilities() {
    let f = row_features(&[0.5, 0.0, 0.25, 0.25]);
    let mean = (0.5f64.ln() + 2.0 * 0.25f64.ln()) / 3.0;
    assert!((f[0] - (0.5f64.ln() - mean)).abs() < 1e-15);
    assert_eq!(f[1], 0.0);
    assert!((f[0] + f[2] + f[3]).abs() < 1e-15);
    assert_eq!(focus_prior(&[0.0, 1.0]), vec![LOG_FLOOR, 0.0]);
}

#[test]
fn zero_output_projection_is_uniform() {
    for cfg in [small_config(), plain_mlp(7)] {
        let mut p = params(cfg, 4);
        p.segment_mut("out_w").fill(0.0);
        p.segment_mut("out_b").fill(0.0);
        let s = p.scores(&history(5, 3, 2), 2).unwrap();
        assert!(s.probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let p = params(small_config(), 9);
    let h = history(5, 3, 9);
    let a = p.scores(&h, 0).unwrap();
    let b = p.scores(&h, 0).unwrap();
    assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn history_beyond_capacity_is_rejected() {
    let p = params(small_config(), 1);
    let err = p.scores(&history(5, 4, 1), 0).unwrap_err();
    assert!(matches!(err, RsdError::Capacity { rounds: 4, capacity: 3 }));
    assert!(p.scores(&EncodingHistory::new(), 0).is_err());
}

#[test]
fn default_shape_rounds_width_to_heads() {
    let cfg = PolicyConfig::for_candidates(20, 5);
    assert_eq!((cfg.d_model, cfg.n_heads), (20, 5));
    let cfg = PolicyConfig::for_candidates(7, 5);
    assert_eq!(cfg.d_model, 10);
    cfg.validate().unwrap();
    assert!(PolicyConfig { n_heads: 3, ..small_config() }.validate().is_err());
}

// Straight-line transformer: every token gets a query, plain loops, no
// ndarray, read-out of the last round afterwards.
fn naive_transformer_logits(p: &PolicyParams, h: &EncodingHistory) -> Vec<f64> {
    let cfg = p.config();
    let (k, d, heads, f) = (cfg.k, cfg.d_model, cfg.n_heads, cfg.ff_dim);
    let dh = d / heads;
    let w = |name: &str, r: usize, c: usize| {
        let seg = p.layout().get(name);
        p.values[seg.offset + r * seg.cols + c]
    };
    let b = |name: &str, c: usize| p.segment(name)[c];
    let linear = |x: &[f64], wn: &str, bn: &str, out: usize| -> Vec<f64> {
        (0..out)
            .map(|c| b(bn, c) + x.iter().enumerate().map(|(r, xv)| xv * w(wn, r, c)).sum::<f64>())
            .collect()
    };
    let norm = |x: &[f64], gn: &str, bn: &str| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * b(gn, i) + b(bn, i))
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());

    let mut e0 = Vec::new();
    for (r, (_, s)) in h.rounds().iter().enumerate() {
        for m in 0..k {
            let mut x = linear(&row_features(s.row(m)), "tok_w", "tok_b", d);
            for c in 0..d {
                x[c] += w("round_emb", r, c) + w("pos_emb", m, c);
            }
            e0.push(x);
        }
    }
    let a: Vec<Vec<f64>> = e0.iter().map(|x| norm(x, "ln1_g", "ln1_b")).collect();
    let q: Vec<Vec<f64>> = a.iter().map(|x| linear(x, "wq", "bq", d)).collect();
    let kk: Vec<Vec<f64>> = a.iter().map(|x| linear(x, "wk", "bk", d)).collect();
    let v: Vec<Vec<f64>> = a.iter().map(|x| linear(x, "wv", "bv", d)).collect();
    let n = e0.len();
    let mut z_rows = Vec::new();
    for i in 0..n {
        let mut o = vec![0.0; d];
        for head in 0..heads {
            let lo = head * dh;
            let raw: Vec<f64> = (0..n)
                .map(|j| (lo..lo + dh).map(|c| q[i][c] * kk[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = raw.iter().map(|x| (x - mx).exp()).collect();
            let tot: f64 = ex.iter().sum();
            for j in 0..n {
                for c in lo..lo + dh {
                    o[c] += ex[j] / tot * v[j][c];
                }
            }
        }
        let att = linear(&o, "wo", "bo", d);
        let x1: Vec<f64> = (0..d).map(|c| e0[i][c] + att[c]).collect();
        let bb = norm(&x1, "ln2_g", "ln2_b");
        let hid: Vec<f64> = linear(&bb, "ff1_w", "ff1_b", f).into_iter().map(gelu).collect();
        let ff = linear(&hid, "ff2_w", "ff2_b", d);
        let x2: Vec<f64> = (0..d).map(|c| x1[c] + ff[c]).collect();
        let cc = norm(&x2, "lnf_g", "lnf_b");
        z_rows.push(linear(&cc, "out_w", "out_b", k));
    }
    let last = &z_rows[n - k..];
    (0..k).map(|j| last.iter().map(|r| r[j]).sum::<f64>() / k as f64).collect()
}

#[test]
fn transformer_matches_straight_line_arithmetic() {
    for seed in 0..3 {
        let p = params(small_config(), 20 + seed);
        for rounds in 1..=3 {
            let h = history(5, rounds, seed);
            let got = p.scores(&h, 0).unwrap().logits;
            let want = naive_transformer_logits(&p, &h);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn mlp_matches_straight_line_arithmetic() {
    let p = params(plain_mlp(6), 2);
    let h = history(5, 2, 4);
    let focus = 3;
    let row = row_features(h.last().unwrap().1.row(focus));
    let w1 = p.segment("mlp1_w");
    let b1 = p.segment("mlp1_b");
    let w2 = p.segment("out_w");
    let b2 = p.segment("out_b");
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let hid: Vec<f64> = (0..6)
        .map(|c| gelu(b1[c] + (0..5).map(|r| row[r] * w1[r * 6 + c]).sum::<f64>()))
        .collect();
    let want: Vec<f64> = (0..5)
        .map(|j| b2[j] + (0..6).map(|c| hid[c] * w2[c * 5 + j]).sum::<f64>())
        .collect();
    let got = p.scores(&h, focus).unwrap().logits;
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-13);
    }
}

/// Largest relative error between the analytic gradient of
/// `bt_log_prob(forward(.), sigma)` and central differences.
fn finite_difference_error(p: &PolicyParams, h: &EncodingHistory, focus: usize, sigma: &Ranking) -> f64 {
    let (scores, tape) = p.forward(h, focus).unwrap();
    let upstream = bt_log_prob_grad(&scores.logits, sigma);
    let analytic = p.backward(&tape, &upstream).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = p.clone();
    for i in 0..p.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let up = bt_log_prob(&probe.scores(h, focus).unwrap().logits, sigma);
        probe.values[i] = orig - step;
        let down = bt_log_prob(&probe.scores(h, focus).unwrap().logits, sigma);
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.0[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[test]
fn transformer_gradient_matches_finite_differences() {
    let p = params(small_config(), 11);
    let h = history(5, 3, 11);
    let sigma = Ranking::new(vec![3, 0, 4, 1, 2]).unwrap();
    let err = finite_difference_error(&p, &h, 0, &sigma);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let p = params(PolicyConfig::mlp(5, 6, 3), 12);
    let h = history(5, 2, 12);
    let sigma = Ranking::new(vec![1, 0, 4, 3, 2]).unwrap();
    let err = finite_difference_error(&p, &h, 2, &sigma);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let p = params(small_config(), 5);
    let (_, tape) = p.forward(&history(5, 2, 5), 0).unwrap();
    let g = p.backward(&tape, &[0.0; 5]).unwrap();
    assert!(g.0.iter().all(|&x| x == 0.0));
    assert!(p.backward(&tape, &[0.0; 4]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    for cfg in [small_config(), PolicyConfig::mlp(5, 6, 3)] {
        let p = params(cfg, 8);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"RSDPOLCY");
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}

#[test]
fn truncated_checkpoint_fails() {
    let p = params(small_config(), 8);
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(read_checkpoint(buf.as_slice()).is_err());
}

/// Column relabelling commutes with the network when every linear map has
/// the form `a I + b 11^T`, embeddings are constant and attention has a
/// single head; the scores then permute with the candidates.
#[test]
fn relabelling_candidates_permutes_scores() {
    let k = 5;
    let cfg = PolicyConfig {
        kind: PolicyKind::Transformer,
        k,
        d_model: k,
        n_heads: 1,
        ff_dim: k,
        max_rounds: 3,
        focus_prior: false,
    };
    let mut p = PolicyParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let coeffs = [
        ("tok_w", 1.3, 0.2),
        ("wq", 0.7, -0.1),
        ("wk", -0.4, 0.3),
        ("wv", 0.9, 0.05),
        ("wo", 0.6, -0.2),
        ("ff1_w", 1.1, 0.15),
        ("ff2_w", -0.8, 0.1),
        ("out_w", 1.7, -0.3),
    ];
    for (name, diag, off) in coeffs {
        let seg = p.segment_mut(name);
        for r in 0..k {
            for c in 0..k {
                seg[r * k + c] = off + if r == c { diag } else { 0.0 };
            }
        }
    }
    for (name, value) in [
        ("tok_b", 0.1),
        ("round_emb", 0.05),
        ("pos_emb", -0.02),
        ("ln1_g", 1.2),
        ("ln1_b", 0.3),
        ("bq", 0.1),
        ("bk", -0.1),
        ("bv", 0.2),
        ("bo", 0.0),
        ("ln2_g", 0.9),
        ("ln2_b", -0.1),
        ("ff1_b", 0.05),
        ("ff2_b", 0.1),
        ("lnf_g", 1.1),
        ("lnf_b", 0.2),
        ("out_b", 0.4),
    ] {
        p.segment_mut(name).fill(value);
    }

    let h = history(k, 3, 77);
    let perm = [2, 4, 0, 1, 3]; // new column c holds old column perm[c]
    let mut relabelled = EncodingHistory::new();
    for (sigma, s) in h.rounds() {
        let probs: Vec<f64> = (0..k)
            .flat_map(|m| (0..k).map(move |c| (m, c)))
            .map(|(m, c)| s.row(m)[perm[c]])
            .collect();
        relabelled.push(sigma.clone(), EncodingMatrix::from_rows(k, probs).unwrap());
    }
    let a = p.scores(&h, 0).unwrap().probs;
    let b = p.scores(&relabelled, 0).unwrap().probs;
    for c in 0..k {
        assert!((b[c] - a[perm[c]]).abs() < 1e-12);
    }
}
