//! Small scalar and vector helpers shared across modules.

/// `log(sigmoid(x))`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over the unmasked entries at `temperature`; masked entries get
/// exactly zero.
pub fn masked_softmax(logits: &[f64], masked: &[bool], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(masked)
        .map(|(&x, &m)| if m { 0.0 } else { ((x - max) / temperature).exp() })
        .collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|p| *p /= sum);
    }
    out
}

/// Highest-probability unplaced item; ties go to the lowest index.
pub fn argmax_unplaced(row: &[f64], placed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &p) in row.iter().enumerate() {
        if placed[j] {
            continue;
        }
        if best.is_none_or(|b| p > row[b]) {
            best = Some(j);
        }
    }
    best
}

/// `KL(p || q)` for strictly positive categorical distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 })
        .sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(1.0) + 0.313_261_687_518_222_8).abs() < 1e-12);
        assert_eq!(log_sigmoid(1e3), 0.0);
        assert!((log_sigmoid(-1e3) + 1e3).abs() < 1e-9);
        assert!((sigmoid(-800.0)).is_finite());
    }

    #[test]
    fn masked_softmax_zeroes_mask() {
        let p = masked_softmax(&[1.0, 5.0, 1.0], &[false, true, false], 1.0);
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax_unplaced(&[0.2, 0.4, 0.4], &[false; 3]), Some(1));
        assert_eq!(argmax_unplaced(&[0.2, 0.4, 0.4], &[false, true, false]), Some(2));
        assert_eq!(argmax_unplaced(&[0.2, 0.4], &[true, true]), None);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = softmax(&[0.3, -1.0, 2.0]);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&p, &softmax(&[0.0, 0.0, 0.0])) > 0.0);
    }
}
