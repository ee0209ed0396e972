//! Numerical checks of the estimator theory: the GRPO ratio identity at
//! `theta = theta_old`, the baseline variance laws and exact unbiasedness on
//! a tiny permutation space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::round_log_prob_grad;
use crate::decoder::Trajectory;
use crate::error::{Result, RsdError};
use crate::policy::{bt_log_prob, bt_log_prob_grad, PolicyGradient, PolicyParams};
use crate::ranking::{episode_reward, Ranking};

/// Gradient of the clipped surrogate
/// `(1/n) sum_t min(r_t A, clip(r_t, 1-eps, 1+eps) A)` with
/// `r_t = pi_theta(sigma_t) / pi_old(sigma_t)`. Returns `(value, gradient)`.
pub fn clipped_surrogate(
    params: &PolicyParams,
    old: &PolicyParams,
    traj: &Trajectory,
    advantage: f64,
    clip_eps: f64,
) -> Result<(f64, PolicyGradient)> {
    let n = traj.rounds.len();
    let mut grad = PolicyGradient::zeros(params.len());
    let mut value = 0.0;
    if n == 0 {
        return Ok((value, grad));
    }
    for t in 0..n {
        let (lp, g, _) = round_log_prob_grad(params, traj, t)?;
        let (lp_old, _, _) = round_log_prob_grad(old, traj, t)?;
        let ratio = (lp - lp_old).exp();
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        let unclipped_term = ratio * advantage;
        let clipped_term = clipped * advantage;
        if unclipped_term <= clipped_term {
            value += unclipped_term / n as f64;
            grad.add_scaled(&g, advantage * ratio / n as f64);
        } else {
            // the clipped branch is constant in theta
            value += clipped_term / n as f64;
        }
    }
    Ok((value, grad))
}

/// Gradient of `(A/n) sum_t log pi_theta(sigma_t)`.
pub fn log_likelihood_objective_grad(
    params: &PolicyParams,
    traj: &Trajectory,
    advantage: f64,
) -> Result<PolicyGradient> {
    let n = traj.rounds.len();
    let mut grad = PolicyGradient::zeros(params.len());
    for t in 0..n {
        let (_, g, _) = round_log_prob_grad(params, traj, t)?;
        grad.add_scaled(&g, advantage / n as f64);
    }
    Ok(grad)
}

/// Compares the ratio-surrogate gradient with the log-likelihood gradient at
/// `theta = theta_old`. Returns the largest relative coordinate error.
pub fn grpo_identity_check(params: &PolicyParams, traj: &Trajectory, advantage: f64) -> Result<f64> {
    let old = params.clone();
    let (_, lhs) = clipped_surrogate(params, &old, traj, advantage, 0.2)?;
    let rhs = log_likelihood_objective_grad(params, traj, advantage)?;
    Ok(lhs
        .0
        .iter()
        .zip(&rhs.0)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceExpConfig {
    /// Spread of the per-query mean return.
    pub sigma_b: f64,
    /// Spread of a sampled return around the query mean.
    pub sigma_w: f64,
    /// Spread of the reference return around the query mean.
    pub sigma_delta: f64,
    pub group_size: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for VarianceExpConfig {
    fn default() -> Self {
        Self {
            sigma_b: 1.0,
            sigma_w: 1.0,
            sigma_delta: 0.0,
            group_size: 5,
            n_samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub var_ref: f64,
    pub var_group: f64,
    pub theory_ref: f64,
    pub theory_group: f64,
}

/// Monte-Carlo estimate of the variance of the reference and leave-one-out
/// advantages under `R_i = mu + eps_i`, `R_ref = mu + delta`.
pub fn variance_experiment(cfg: &VarianceExpConfig) -> Result<VarianceReport> {
    if cfg.sigma_b < 0.0 || cfg.sigma_w < 0.0 || cfg.sigma_delta < 0.0 {
        return Err(RsdError::Config("standard deviations must be non-negative".into()));
    }
    if cfg.group_size < 2 {
        return Err(RsdError::Config("group size must be at least 2".into()));
    }
    if cfg.n_samples < 2 {
        return Err(RsdError::Config("need at least two samples".into()));
    }
    let g = cfg.group_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut ref_stats = Welford::default();
    let mut group_stats = Welford::default();
    for _ in 0..cfg.n_samples {
        let mu = cfg.sigma_b * normal();
        let r_ref = mu + cfg.sigma_delta * normal();
        let r0 = mu + cfg.sigma_w * normal();
        let mut others = 0.0;
        for _ in 1..g {
            others += mu + cfg.sigma_w * normal();
        }
        ref_stats.push(r0 - r_ref);
        group_stats.push(r0 - others / (g - 1) as f64);
    }
    let w2 = cfg.sigma_w * cfg.sigma_w;
    Ok(VarianceReport {
        var_ref: ref_stats.variance(),
        var_group: group_stats.variance(),
        theory_ref: w2 + cfg.sigma_delta * cfg.sigma_delta,
        theory_group: w2 * g as f64 / (g - 1) as f64,
    })
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}

/// Every ordering of `0..k`, lexicographic.
pub fn all_permutations(k: usize) -> Vec<Ranking> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Ranking>) {
        if prefix.len() == used.len() {
            out.push(Ranking::new(prefix.clone()).expect("permutation"));
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                extend(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    /// `E[R grad log pi]`.
    pub grad_no_baseline: Vec<f64>,
    /// `E[(R_1 - mean of the other group returns) grad log pi(sigma_1)]`.
    pub grad_group: Vec<f64>,
    /// `E[(R - R_ref) grad log pi]` with `R_ref` the greedy ranking's return.
    pub grad_reference: Vec<f64>,
    /// `E[grad log pi]`.
    pub mean_score: Vec<f64>,
    /// `E[R_1 - mean of the other group returns]`.
    pub mean_group_advantage: f64,
    pub r_ref: f64,
    /// Largest coordinate gap between the three baseline gradients.
    pub max_baseline_gap: f64,
}

/// Exact expectations under the normalised Bradley-Terry distribution over
/// all orderings of `scores.len() <= 4` items, with return
/// `episode_reward(sigma, target)` and a group of `group_size` draws.
pub fn unbiasedness_check(scores: &[f64], target: &Ranking, group_size: usize) -> Result<UnbiasednessReport> {
    unbiasedness_check_with(scores, |p| episode_reward(p, target), group_size)
}

/// As [`unbiasedness_check`] with an arbitrary return function.
pub fn unbiasedness_check_with(
    scores: &[f64],
    reward: impl Fn(&Ranking) -> Result<f64>,
    group_size: usize,
) -> Result<UnbiasednessReport> {
    let k = scores.len();
    if !(2..=4).contains(&k) {
        return Err(RsdError::Config("enumeration supports 2 to 4 items".into()));
    }
    if group_size < 2 {
        return Err(RsdError::Config("group size must be at least 2".into()));
    }
    let perms = all_permutations(k);
    let weights: Vec<f64> = perms.iter().map(|p| bt_log_prob(scores, p).exp()).collect();
    let z: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let returns: Vec<f64> = perms.iter().map(&reward).collect::<Result<_>>()?;

    let raw: Vec<Vec<f64>> = perms.iter().map(|p| bt_log_prob_grad(scores, p)).collect();
    let mut raw_mean = vec![0.0; k];
    for (p, g) in probs.iter().zip(&raw) {
        for c in 0..k {
            raw_mean[c] += p * g[c];
        }
    }
    let score_fn: Vec<Vec<f64>> = raw
        .iter()
        .map(|g| g.iter().zip(&raw_mean).map(|(a, m)| a - m).collect())
        .collect();

    let mut mean_score = vec![0.0; k];
    let mut grad_no_baseline = vec![0.0; k];
    let r_ref = reward(&Ranking::argsort_desc(scores))?;
    let mut grad_reference = vec![0.0; k];
    for s in 0..perms.len() {
        for c in 0..k {
            mean_score[c] += probs[s] * score_fn[s][c];
            grad_no_baseline[c] += probs[s] * returns[s] * score_fn[s][c];
            grad_reference[c] += probs[s] * (returns[s] - r_ref) * score_fn[s][c];
        }
    }

    // enumerate every joint draw of the group
    let n = perms.len();
    let mut grad_group = vec![0.0; k];
    let mut mean_group_advantage = 0.0;
    let mut idx = vec![0usize; group_size];
    loop {
        let p: f64 = idx.iter().map(|&i| probs[i]).product();
        let others: f64 = idx[1..].iter().map(|&i| returns[i]).sum::<f64>() / (group_size - 1) as f64;
        let adv = returns[idx[0]] - others;
        mean_group_advantage += p * adv;
        for c in 0..k {
            grad_group[c] += p * adv * score_fn[idx[0]][c];
        }
        let mut pos = 0;
        loop {
            if pos == group_size {
                let gap = max_gap(&[&grad_no_baseline, &grad_group, &grad_reference]);
                return Ok(UnbiasednessReport {
                    grad_no_baseline,
                    grad_group,
                    grad_reference,
                    mean_score,
                    mean_group_advantage,
                    r_ref,
                    max_baseline_gap: gap,
                });
            }
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn max_gap(vectors: &[&Vec<f64>]) -> f64 {
    let mut gap: f64 = 0.0;
    for a in vectors {
        for b in vectors {
            for (x, y) in a.iter().zip(b.iter()) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    gap
}
