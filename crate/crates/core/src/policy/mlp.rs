//! Ablation head: a two-layer perceptron over one row of the latest encoding,
//! the next-item distribution at the rejection point.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::transformer::{accumulate, gelu, gelu_grad, mat, vector};
use super::{EncodingHistory, PolicyParams, RelevanceScores};

#[derive(Clone, Debug)]
pub struct Tape {
    input: Array1<f64>,
    h_pre: Array1<f64>,
    h: Array1<f64>,
}

pub(super) fn forward(
    p: &PolicyParams,
    history: &EncodingHistory,
    focus_row: usize,
) -> (RelevanceScores, Tape) {
    let (_, s) = history.last().expect("non-empty history");
    let input = Array1::from(super::row_features(s.row(focus_row)));
    let h_pre = input.dot(&mat(p, "mlp1_w")) + &vector(p, "mlp1_b");
    let h = h_pre.mapv(gelu);
    let logits = h.dot(&mat(p, "out_w")) + &vector(p, "out_b");
    (
        RelevanceScores::from_logits(logits.to_vec()),
        Tape { input, h_pre, h },
    )
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row).as_standard_layout().into_owned()
}

pub(super) fn backward(p: &PolicyParams, t: &Tape, d_logits: &[f64], grad: &mut [f64]) {
    let dl = ArrayView1::from(d_logits).to_owned();
    accumulate(p, grad, "out_w", outer(&t.h, &dl).as_slice().expect("contiguous"));
    accumulate(p, grad, "out_b", d_logits);
    let dh = mat(p, "out_w").dot(&dl) * &t.h_pre.mapv(gelu_grad);
    accumulate(p, grad, "mlp1_w", outer(&t.input, &dh).as_slice().expect("contiguous"));
    accumulate(p, grad, "mlp1_b", dh.as_slice().expect("contiguous"));
}
