//! Permutation likelihood and drafting over candidate scores.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use serde::{Deserialize, Serialize};

use crate::numeric::{log_sigmoid, log_sum_exp, sigmoid};
use crate::ranking::Ranking;

/// Bradley-Terry log-likelihood of a full ranking: the sum over every ordered
/// pair `(a before b)` of `log sigmoid(s_a - s_b)`.
pub fn bt_log_prob(scores: &[f64], sigma: &Ranking) -> f64 {
    bt_suffix_log_prob(scores, sigma, 0)
}

/// Gradient of [`bt_log_prob`] with respect to the scores.
pub fn bt_log_prob_grad(scores: &[f64], sigma: &Ranking) -> Vec<f64> {
    bt_suffix_log_prob_grad(scores, sigma, 0)
}

/// Bradley-Terry log-likelihood of the positions from `from` onwards, the
/// earlier positions being given.
pub fn bt_suffix_log_prob(scores: &[f64], sigma: &Ranking, from: usize) -> f64 {
    let order = sigma.as_slice();
    let mut total = 0.0;
    for i in from.min(order.len())..order.len() {
        for &b in &order[i + 1..] {
            total += log_sigmoid(scores[order[i]] - scores[b]);
        }
    }
    total
}

/// Gradient of [`bt_suffix_log_prob`] with respect to the scores.
pub fn bt_suffix_log_prob_grad(scores: &[f64], sigma: &Ranking, from: usize) -> Vec<f64> {
    let order = sigma.as_slice();
    let mut grad = vec![0.0; scores.len()];
    for i in from.min(order.len())..order.len() {
        let a = order[i];
        for &b in &order[i + 1..] {
            let w = 1.0 - sigmoid(scores[a] - scores[b]);
            grad[a] += w;
            grad[b] -= w;
        }
    }
    grad
}

/// Plackett-Luce log-likelihood of the positions from `from` onwards: each
/// item is chosen in turn by a softmax over the items not yet placed.
pub fn pl_suffix_log_prob(scores: &[f64], sigma: &Ranking, from: usize) -> f64 {
    let order = sigma.as_slice();
    let mut total = 0.0;
    for i in from.min(order.len())..order.len() {
        let rest: Vec<f64> = order[i..].iter().map(|&j| scores[j]).collect();
        total += scores[order[i]] - log_sum_exp(&rest);
    }
    total
}

/// Gradient of [`pl_suffix_log_prob`] with respect to the scores.
pub fn pl_suffix_log_prob_grad(scores: &[f64], sigma: &Ranking, from: usize) -> Vec<f64> {
    let order = sigma.as_slice();
    let mut grad = vec![0.0; scores.len()];
    for i in from.min(order.len())..order.len() {
        let rest = &order[i..];
        let lse = log_sum_exp(&rest.iter().map(|&j| scores[j]).collect::<Vec<_>>());
        grad[order[i]] += 1.0;
        for &j in rest {
            grad[j] -= (scores[j] - lse).exp();
        }
    }
    grad
}

/// Permutation likelihood used for drafted tails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    /// Pairwise product over every drafted pair.
    #[default]
    BradleyTerry,
    /// Sequential softmax, the law of [`sample_tail`].
    PlackettLuce,
}

impl Likelihood {
    pub fn suffix_log_prob(self, scores: &[f64], sigma: &Ranking, from: usize) -> f64 {
        match self {
            Likelihood::BradleyTerry => bt_suffix_log_prob(scores, sigma, from),
            Likelihood::PlackettLuce => pl_suffix_log_prob(scores, sigma, from),
        }
    }

    pub fn suffix_log_prob_grad(self, scores: &[f64], sigma: &Ranking, from: usize) -> Vec<f64> {
        match self {
            Likelihood::BradleyTerry => bt_suffix_log_prob_grad(scores, sigma, from),
            Likelihood::PlackettLuce => pl_suffix_log_prob_grad(scores, sigma, from),
        }
    }
}

fn remaining(k: usize, prefix: &[usize]) -> Vec<usize> {
    let mut placed = vec![false; k];
    for &p in prefix {
        placed[p] = true;
    }
    (0..k).filter(|&j| !placed[j]).collect()
}

fn complete(prefix: &[usize], tail: Vec<usize>) -> Ranking {
    let mut order = prefix.to_vec();
    order.extend(tail);
    Ranking::new(order).expect("prefix plus its complement is a permutation")
}

/// Fills the positions after `prefix` by sorting the unplaced items on
/// Gumbel-perturbed scores, i.e. a Plackett-Luce draw.
pub fn sample_tail<R: Rng + ?Sized>(scores: &[f64], prefix: &[usize], rng: &mut R) -> Ranking {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let mut keyed: Vec<(f64, usize)> = remaining(scores.len(), prefix)
        .into_iter()
        .map(|j| (scores[j] + gumbel.sample(rng), j))
        .collect();
    keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    complete(prefix, keyed.into_iter().map(|(_, j)| j).collect())
}

/// Fills the positions after `prefix` with the unplaced items by descending
/// score; ties go to the lower index.
pub fn greedy_tail(scores: &[f64], prefix: &[usize]) -> Ranking {
    let mut tail = remaining(scores.len(), prefix);
    tail.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    complete(prefix, tail)
}
