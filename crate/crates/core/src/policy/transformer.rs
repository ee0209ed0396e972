//! Single-block transformer relevance head with a hand-written backward pass.
//!
//! Every row of every encoding in the history is one token: `t` rounds give
//! `t * K` tokens of width `K`. Tokens are projected to `d_model`, tagged with
//! round and rank-position embeddings, and passed through one pre-norm
//! attention + feed-forward block. Only the latest round's `K` tokens are read
//! out, so queries, the feed-forward layer and the output projection run on
//! those rows alone while keys and values span the whole history. The read-out
//! rows are projected back to width `K` and mean-pooled into logits.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{EncodingHistory, PolicyParams, RelevanceScores};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct Tape {
    rounds: usize,
    x_in: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    keys: Array2<f64>,
    vals: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    lnf: LnCache,
    c: Array2<f64>,
}

pub(super) fn mat<'a>(p: &'a PolicyParams, name: &str) -> ArrayView2<'a, f64> {
    let seg = p.layout().get(name);
    ArrayView2::from_shape((seg.rows, seg.cols), &p.values[seg.range()]).expect("segment shape")
}

pub(super) fn vector<'a>(p: &'a PolicyParams, name: &str) -> ArrayView1<'a, f64> {
    ArrayView1::from(p.segment(name))
}

pub(super) fn accumulate(p: &PolicyParams, grad: &mut [f64], name: &str, value: &[f64]) {
    let range = p.layout().get(name).range();
    debug_assert_eq!(range.len(), value.len());
    for (g, v) in grad[range].iter_mut().zip(value) {
        *g += v;
    }
}

fn acc2(p: &PolicyParams, grad: &mut [f64], name: &str, value: Array2<f64>) {
    accumulate(p, grad, name, value.as_standard_layout().as_slice().expect("contiguous"));
}

fn acc1(p: &PolicyParams, grad: &mut [f64], name: &str, value: Array1<f64>) {
    accumulate(p, grad, name, value.as_slice().expect("contiguous"));
}

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let dim = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / dim;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let y = &xhat * &gain + &bias;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, d_gain, d_bias)`.
fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dim = dy.ncols() as f64;
    let d_gain = (dy * &cache.xhat).sum_axis(Axis(0));
    let d_bias = dy.sum_axis(Axis(0));
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = inv / dim * (dim * gi - sum_g - xi * sum_gx);
        }
    }
    (dx, d_gain, d_bias)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(super) fn forward(p: &PolicyParams, history: &EncodingHistory) -> (RelevanceScores, Tape) {
    let cfg = p.config();
    let (k, d, heads) = (cfg.k, cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let rounds = history.len();
    let n = rounds * k;
    let last = (rounds - 1) * k;

    let mut x_in = Array2::zeros((n, k));
    for (r, (_, s)) in history.rounds().iter().enumerate() {
        for m in 0..k {
            x_in.row_mut(r * k + m).assign(&Array1::from(super::row_features(s.row(m))));
        }
    }
    let mut e0 = x_in.dot(&mat(p, "tok_w")) + &vector(p, "tok_b");
    let round_emb = mat(p, "round_emb");
    let pos_emb = mat(p, "pos_emb");
    for r in 0..rounds {
        for m in 0..k {
            let mut row = e0.row_mut(r * k + m);
            row += &round_emb.row(r);
            row += &pos_emb.row(m);
        }
    }

    let (a, ln1) = layer_norm(&e0, vector(p, "ln1_g"), vector(p, "ln1_b"));
    let q = a.slice(s![last.., ..]).dot(&mat(p, "wq")) + &vector(p, "bq");
    let keys = a.dot(&mat(p, "wk")) + &vector(p, "bk");
    let vals = a.dot(&mat(p, "wv")) + &vector(p, "bv");
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros((k, d));
    let mut attn = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut weights = q.slice(cols).dot(&keys.slice(cols).t()) * scale;
        softmax_rows(&mut weights);
        o.slice_mut(cols).assign(&weights.dot(&vals.slice(cols)));
        attn.push(weights);
    }
    let x1 = &e0.slice(s![last.., ..]) + &(o.dot(&mat(p, "wo")) + &vector(p, "bo"));

    let (b, ln2) = layer_norm(&x1, vector(p, "ln2_g"), vector(p, "ln2_b"));
    let h_pre = b.dot(&mat(p, "ff1_w")) + &vector(p, "ff1_b");
    let h = h_pre.mapv(gelu);
    let x2 = &x1 + &(h.dot(&mat(p, "ff2_w")) + &vector(p, "ff2_b"));

    let (c, lnf) = layer_norm(&x2, vector(p, "lnf_g"), vector(p, "lnf_b"));
    let z = c.dot(&mat(p, "out_w")) + &vector(p, "out_b");
    let logits = z.mean_axis(Axis(0)).expect("k > 0").to_vec();

    let tape = Tape {
        rounds,
        x_in,
        ln1,
        a,
        q,
        keys,
        vals,
        attn,
        o,
        ln2,
        b,
        h_pre,
        h,
        lnf,
        c,
    };
    (RelevanceScores::from_logits(logits), tape)
}

pub(super) fn backward(p: &PolicyParams, t: &Tape, d_logits: &[f64], grad: &mut [f64]) {
    let cfg = p.config();
    let (k, d, heads) = (cfg.k, cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let last = (t.rounds - 1) * k;
    let scale = 1.0 / (dh as f64).sqrt();

    // mean pooling spreads the logit gradient evenly over the K read-out rows
    let dz_row = ArrayView1::from(d_logits).mapv(|g| g / k as f64);
    let dz = dz_row.broadcast((k, k)).expect("k x k").to_owned();
    acc2(p, grad, "out_w", t.c.t().dot(&dz));
    acc1(p, grad, "out_b", dz.sum_axis(Axis(0)));
    let dc = dz.dot(&mat(p, "out_w").t());

    let (dx2, dg, db) = layer_norm_back(&dc, &t.lnf, vector(p, "lnf_g"));
    acc1(p, grad, "lnf_g", dg);
    acc1(p, grad, "lnf_b", db);

    acc2(p, grad, "ff2_w", t.h.t().dot(&dx2));
    acc1(p, grad, "ff2_b", dx2.sum_axis(Axis(0)));
    let dh_act = dx2.dot(&mat(p, "ff2_w").t());
    let dh_pre = dh_act * &t.h_pre.mapv(gelu_grad);
    acc2(p, grad, "ff1_w", t.b.t().dot(&dh_pre));
    acc1(p, grad, "ff1_b", dh_pre.sum_axis(Axis(0)));
    let d_b = dh_pre.dot(&mat(p, "ff1_w").t());
    let (dx1_ln, dg, db) = layer_norm_back(&d_b, &t.ln2, vector(p, "ln2_g"));
    acc1(p, grad, "ln2_g", dg);
    acc1(p, grad, "ln2_b", db);
    let dx1 = dx2 + dx1_ln;

    acc2(p, grad, "wo", t.o.t().dot(&dx1));
    acc1(p, grad, "bo", dx1.sum_axis(Axis(0)));
    let d_o = dx1.dot(&mat(p, "wo").t());
    let mut dq = Array2::zeros(t.q.raw_dim());
    let mut dkeys = Array2::zeros(t.keys.raw_dim());
    let mut dvals = Array2::zeros(t.vals.raw_dim());
    for (head, weights) in t.attn.iter().enumerate() {
        let cols = s![.., head * dh..(head + 1) * dh];
        let d_oh = d_o.slice(cols);
        let dw = d_oh.dot(&t.vals.slice(cols).t());
        dvals.slice_mut(cols).assign(&weights.t().dot(&d_oh));
        let row_dot = (&dw * weights).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dscore = weights * &(dw - &row_dot) * scale;
        dq.slice_mut(cols).assign(&dscore.dot(&t.keys.slice(cols)));
        dkeys.slice_mut(cols).assign(&dscore.t().dot(&t.q.slice(cols)));
    }
    let a_last = t.a.slice(s![last.., ..]);
    acc2(p, grad, "wq", a_last.t().dot(&dq));
    acc1(p, grad, "bq", dq.sum_axis(Axis(0)));
    acc2(p, grad, "wk", t.a.t().dot(&dkeys));
    acc1(p, grad, "bk", dkeys.sum_axis(Axis(0)));
    acc2(p, grad, "wv", t.a.t().dot(&dvals));
    acc1(p, grad, "bv", dvals.sum_axis(Axis(0)));
    let mut da = dkeys.dot(&mat(p, "wk").t()) + dvals.dot(&mat(p, "wv").t());
    {
        let mut tail = da.slice_mut(s![last.., ..]);
        tail += &dq.dot(&mat(p, "wq").t());
    }

    let (mut de0, dg, db) = layer_norm_back(&da, &t.ln1, vector(p, "ln1_g"));
    acc1(p, grad, "ln1_g", dg);
    acc1(p, grad, "ln1_b", db);
    {
        let mut tail = de0.slice_mut(s![last.., ..]);
        tail += &dx1;
    }

    acc2(p, grad, "tok_w", t.x_in.t().dot(&de0));
    acc1(p, grad, "tok_b", de0.sum_axis(Axis(0)));
    let mut d_round = Array2::zeros((cfg.max_rounds, d));
    let mut d_pos = Array2::zeros((k, d));
    for r in 0..t.rounds {
        for m in 0..k {
            let row = de0.row(r * k + m);
            let mut dr = d_round.row_mut(r);
            dr += &row;
            let mut dp = d_pos.row_mut(m);
            dp += &row;
        }
    }
    acc2(p, grad, "round_emb", d_round);
    acc2(p, grad, "pos_emb", d_pos);
}
