//! Two-stage training of the relevance network.
//!
//! Stage I fits the network to the target ranking from the first-token
//! encoding. Stage II runs sampled serving episodes and ascends an
//! advantage-weighted log-likelihood with a KL penalty towards a frozen
//! snapshot.

mod adam;
pub mod theory;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::decoder::{run_episode, PolicyDrafter, Trajectory};
use crate::error::{Result, RsdError};
use crate::oracle::{BudgetLedger, Oracle, QueryContext};
use crate::decoder::verify;
use crate::policy::{bt_suffix_log_prob, bt_suffix_log_prob_grad, EncodingHistory, Likelihood, PolicyGradient, PolicyParams};
use crate::ranking::{episode_reward, Ranking};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMode {
    #[default]
    Reference,
    Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Encoding budget per episode.
    pub budget: usize,
    /// Sampled trajectories per query.
    pub group_size: usize,
    pub beta_kl: f64,
    pub batch_queries: usize,
    pub adam: AdamConfig,
    /// Stage I learning rate; Stage II uses `adam.lr`.
    pub stage1_lr: f64,
    pub stage1_steps: usize,
    /// Supervise every draft state of a greedy rollout under `budget`, not
    /// only the first one.
    pub stage1_all_rounds: bool,
    /// Outer iterations; the reference snapshot is refreshed at each.
    pub stage2_iters: usize,
    /// Adam updates per outer iteration.
    pub stage2_updates_per_iter: usize,
    pub advantage_mode: AdvantageMode,
    /// Tails are sampled from `logits / sample_temperature`.
    pub sample_temperature: f64,
    /// Tail likelihood differentiated in Stage II.
    pub likelihood: Likelihood,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 5,
            group_size: 8,
            beta_kl: 0.1,
            batch_queries: 16,
            adam: AdamConfig::default(),
            stage1_lr: 1e-3,
            stage1_steps: 300,
            stage1_all_rounds: true,
            stage2_iters: 100,
            stage2_updates_per_iter: 4,
            advantage_mode: AdvantageMode::Reference,
            sample_temperature: 1.0,
            likelihood: Likelihood::BradleyTerry,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(RsdError::Config("group size must be at least 2".into()));
        }
        if self.budget < 1 {
            return Err(RsdError::Config("budget must be at least 1".into()));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(RsdError::Config("beta_kl must be non-negative".into()));
        }
        if self.batch_queries == 0 {
            return Err(RsdError::Config("batch_queries must be positive".into()));
        }
        if !(self.sample_temperature > 0.0) || !self.sample_temperature.is_finite() {
            return Err(RsdError::Config("sample_temperature must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.stage1_lr > 0.0) {
            return Err(RsdError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen copy of the policy, used for the greedy reference rollout and the
/// KL anchor.
#[derive(Clone, Debug)]
pub struct ReferenceSnapshot {
    pub params: PolicyParams,
}

impl ReferenceSnapshot {
    pub fn take(params: &PolicyParams) -> Self {
        Self { params: params.clone() }
    }
}

pub fn compute_advantages(returns: &[f64], r_ref: f64, mode: AdvantageMode) -> Result<Vec<f64>> {
    match mode {
        AdvantageMode::Reference => Ok(returns.iter().map(|r| r - r_ref).collect()),
        AdvantageMode::Group => {
            let g = returns.len();
            if g < 2 {
                return Err(RsdError::Config("group advantage needs at least two returns".into()));
            }
            let total: f64 = returns.iter().sum();
            Ok(returns
                .iter()
                .map(|r| r - (total - r) / (g - 1) as f64)
                .collect())
        }
    }
}

/// Input and label for one supervised Stage I example: the state of the
/// first redraft when serving starts from the first-token ranking.
#[derive(Clone, Debug)]
pub struct Stage1Example {
    pub history: EncodingHistory,
    pub focus_row: usize,
    /// Leading positions of the target that the redraft keeps for free.
    pub fixed: usize,
    pub target: Ranking,
}

/// Builds the Stage I example for a query. The encoding of the first-token
/// ranking is a training-time call outside any serving budget.
pub fn stage1_example<O: Oracle + ?Sized>(oracle: &O, ctx: &QueryContext) -> Result<Stage1Example> {
    let sigma_init = Ranking::argsort_desc(&oracle.first_token_distribution(ctx)?);
    let mut ledger = BudgetLedger::new(1);
    let s_init = crate::oracle::encode_ranking(oracle, ctx, &sigma_init, &mut ledger)?;
    let verdict = verify(&sigma_init, &s_init)?;
    let k = ctx.candidate_count;
    let focus_row = verdict.kept().min(k - 1);
    let mut history = EncodingHistory::new();
    history.push(sigma_init, s_init);
    Ok(Stage1Example {
        history,
        focus_row,
        fixed: (verdict.kept() + 1).min(k),
        target: oracle.target_ranking(ctx)?,
    })
}

/// Stage I examples at every draft state of a greedy-drafting episode under
/// `budget`. The first is the state [`stage1_example`] builds.
pub fn stage1_rollout_examples<O: Oracle + ?Sized>(
    oracle: &O,
    ctx: &QueryContext,
    budget: usize,
) -> Result<Vec<Stage1Example>> {
    let target = oracle.target_ranking(ctx)?;
    let traj = crate::decoder::run_gsd(oracle, ctx, budget.max(2))?;
    Ok(traj
        .rounds
        .iter()
        .map(|r| Stage1Example {
            history: traj.history.truncated(r.history_len),
            focus_row: r.focus_row.min(ctx.candidate_count - 1),
            fixed: r.fixed,
            target: target.clone(),
        })
        .collect())
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn stage1_loss(params: &PolicyParams, examples: &[Stage1Example]) -> Result<(f64, PolicyGradient)> {
    let mut grad = PolicyGradient::zeros(params.len());
    let mut loss = 0.0;
    let scale = 1.0 / examples.len().max(1) as f64;
    for ex in examples {
        let (scores, tape) = params.forward(&ex.history, ex.focus_row)?;
        loss -= bt_suffix_log_prob(&scores.logits, &ex.target, ex.fixed) * scale;
        let d: Vec<f64> = bt_suffix_log_prob_grad(&scores.logits, &ex.target, ex.fixed)
            .into_iter()
            .map(|g| -g)
            .collect();
        grad.add_scaled(&params.backward(&tape, &d)?, scale);
    }
    Ok((loss, grad))
}

/// One Adam step on precomputed examples. Returns the loss before the step.
pub fn stage1_step_on(params: &mut PolicyParams, examples: &[Stage1Example], optimizer: &mut Adam) -> Result<f64> {
    let (loss, grad) = stage1_loss(params, examples)?;
    if !grad.is_finite() {
        return Err(RsdError::NonFiniteGradient);
    }
    optimizer.descend(&mut params.values, &grad.0);
    Ok(loss)
}

pub fn stage1_step<O: Oracle + ?Sized>(
    params: &mut PolicyParams,
    ctx: &QueryContext,
    oracle: &O,
    optimizer: &mut Adam,
) -> Result<f64> {
    let example = stage1_example(oracle, ctx)?;
    stage1_step_on(params, std::slice::from_ref(&example), optimizer)
}

/// Greedy serving episode under the frozen snapshot and its return.
pub fn reference_rollout<O: Oracle + ?Sized>(
    snapshot: &ReferenceSnapshot,
    ctx: &QueryContext,
    oracle: &O,
    budget: usize,
) -> Result<(Ranking, f64)> {
    let drafter = PolicyDrafter::greedy(&snapshot.params);
    // greedy tails never draw randomness
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let traj = run_episode(oracle, ctx, &drafter, budget, &mut rng)?;
    let target = oracle.target_ranking(ctx)?;
    let r = episode_reward(&traj.final_ranking, &target)?;
    Ok((traj.final_ranking, r))
}

/// Gradient of `log pi(sigma_t)` over the drafted positions of one round, with the scores the
/// policy produced there.
pub fn round_log_prob_grad(
    params: &PolicyParams,
    traj: &Trajectory,
    round: usize,
) -> Result<(f64, PolicyGradient, Vec<f64>)> {
    let r = &traj.rounds[round];
    let history = traj.history.truncated(r.history_len);
    let (scores, tape) = params.forward(&history, r.focus_row)?;
    let lp = bt_suffix_log_prob(&scores.logits, &r.ranking, r.fixed);
    let d = bt_suffix_log_prob_grad(&scores.logits, &r.ranking, r.fixed);
    Ok((lp, params.backward(&tape, &d)?, scores.probs))
}

fn kl_and_grad(p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let kl = crate::numeric::kl_divergence(p, q);
    let grad = p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| if pk > 0.0 { pk * (pk.ln() - qk.ln() - kl) } else { 0.0 })
        .collect();
    (kl, grad)
}

/// Per-trajectory objective `(1/n) sum_t (A log pi(sigma_t) - beta KL_t)`,
/// with `pi` the tail model on `logits / temperature`.
#[derive(Clone, Debug)]
pub struct TrajectoryObjective {
    pub value: f64,
    pub grad: PolicyGradient,
    /// Sum of the per-state KL divergences.
    pub kl_sum: f64,
}

pub fn trajectory_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    traj: &Trajectory,
    advantage: f64,
    beta_kl: f64,
    temperature: f64,
    likelihood: Likelihood,
) -> Result<TrajectoryObjective> {
    let mut out = TrajectoryObjective {
        value: 0.0,
        grad: PolicyGradient::zeros(params.len()),
        kl_sum: 0.0,
    };
    let n = traj.rounds.len();
    if n == 0 {
        return Ok(out);
    }
    let w = 1.0 / n as f64;
    for round in &traj.rounds {
        let history = traj.history.truncated(round.history_len);
        let (scores, tape) = params.forward(&history, round.focus_row)?;
        let q = reference.scores(&history, round.focus_row)?.probs;
        let (kl, d_kl) = kl_and_grad(&scores.probs, &q);
        let z: Vec<f64> = scores.logits.iter().map(|l| l / temperature).collect();
        let lp = likelihood.suffix_log_prob(&z, &round.ranking, round.fixed);
        let d: Vec<f64> = likelihood
            .suffix_log_prob_grad(&z, &round.ranking, round.fixed)
            .iter()
            .zip(&d_kl)
            .map(|(a, b)| advantage * a / temperature - beta_kl * b)
            .collect();
        out.grad.add_scaled(&params.backward(&tape, &d)?, w);
        out.value += w * (advantage * lp - beta_kl * kl);
        out.kl_sum += kl;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RpoStats {
    #[serde(rename = "mean_R")]
    pub mean_return: f64,
    #[serde(rename = "mean_R_ref")]
    pub mean_ref_return: f64,
    #[serde(rename = "mean_adv")]
    pub mean_advantage: f64,
    /// Mean KL over visited states.
    pub kl: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

struct QueryContribution {
    grad: PolicyGradient,
    objective: f64,
    returns: Vec<f64>,
    r_ref: f64,
    advantages: Vec<f64>,
    kl_sum: f64,
    states: usize,
}

fn query_contribution<O: Oracle + ?Sized>(
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    ctx: &QueryContext,
    oracle: &O,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<QueryContribution> {
    let target = oracle.target_ranking(ctx)?;
    let (_, r_ref) = reference_rollout(reference, ctx, oracle, cfg.budget)?;
    let drafter = PolicyDrafter::sampled(params, cfg.sample_temperature);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(cfg.group_size);
    let mut returns = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let traj = run_episode(oracle, ctx, &drafter, cfg.budget, &mut rng)?;
        returns.push(episode_reward(&traj.final_ranking, &target)?);
        trajectories.push(traj);
    }
    let advantages = compute_advantages(&returns, r_ref, cfg.advantage_mode)?;

    let mut grad = PolicyGradient::zeros(params.len());
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut states = 0;
    let per_traj = 1.0 / cfg.group_size as f64;
    for (traj, &adv) in trajectories.iter().zip(&advantages) {
        let part = trajectory_objective(params, &reference.params, traj, adv, cfg.beta_kl, cfg.sample_temperature, cfg.likelihood)?;
        grad.add_scaled(&part.grad, per_traj);
        objective += part.value * per_traj;
        kl_sum += part.kl_sum;
        states += traj.rounds.len();
    }
    Ok(QueryContribution {
        grad,
        objective,
        returns,
        r_ref,
        advantages,
        kl_sum,
        states,
    })
}

/// Gradient of the RPO objective averaged over the batch, with its stats.
pub fn rpo_gradient<O: Oracle + ?Sized, R: Rng + ?Sized>(
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    batch: &[QueryContext],
    oracle: &O,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PolicyGradient, RpoStats)> {
    cfg.validate()?;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let parts: Vec<QueryContribution> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(ctx, &seed)| query_contribution(params, reference, ctx, oracle, cfg, seed))
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len().max(1) as f64;
    let mut grad = PolicyGradient::zeros(params.len());
    let mut stats = RpoStats::default();
    let mut kl_sum = 0.0;
    let mut states = 0;
    let mut n_returns = 0.0;
    for part in &parts {
        grad.add_scaled(&part.grad, scale);
        stats.objective += part.objective * scale;
        stats.mean_return += part.returns.iter().sum::<f64>();
        stats.mean_advantage += part.advantages.iter().sum::<f64>();
        stats.mean_ref_return += part.r_ref * scale;
        n_returns += part.returns.len() as f64;
        kl_sum += part.kl_sum;
        states += part.states;
    }
    if n_returns > 0.0 {
        stats.mean_return /= n_returns;
        stats.mean_advantage /= n_returns;
    }
    stats.kl = if states > 0 { kl_sum / states as f64 } else { 0.0 };
    stats.grad_norm = grad.norm();
    Ok((grad, stats))
}

/// One Adam ascent step on the RPO objective over a batch of queries.
/// A non-finite gradient leaves `params` untouched and returns an error.
pub fn rpo_update<O: Oracle + ?Sized, R: Rng + ?Sized>(
    params: &mut PolicyParams,
    reference: &ReferenceSnapshot,
    batch: &[QueryContext],
    oracle: &O,
    cfg: &TrainConfig,
    optimizer: &mut Adam,
    rng: &mut R,
) -> Result<RpoStats> {
    let (grad, stats) = rpo_gradient(params, reference, batch, oracle, cfg, rng)?;
    if !grad.is_finite() {
        return Err(RsdError::NonFiniteGradient);
    }
    optimizer.ascend(&mut params.values, &grad.0);
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum TrainLogEntry {
    Stage1 { step: usize, loss: f64 },
    Stage2 {
        iter: usize,
        update: usize,
        #[serde(flatten)]
        stats: RpoStats,
    },
    Skipped { iter: usize, update: usize, reason: String },
}

/// Cycles through a shuffled copy of the training queries in fixed-size batches.
struct BatchCycler<'a> {
    queries: &'a [QueryContext],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchCycler<'a> {
    fn new(queries: &'a [QueryContext], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut rng);
        Self { queries, order, pos: 0, rng }
    }

    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.queries.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs Stage I then Stage II, calling `log` after every update.
pub fn train<O: Oracle + ?Sized>(
    params: &mut PolicyParams,
    oracle: &O,
    queries: &[QueryContext],
    cfg: &TrainConfig,
    mut log: impl FnMut(&TrainLogEntry),
) -> Result<()> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(RsdError::Config("no training queries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if cfg.stage1_steps > 0 {
        let examples: Vec<Vec<Stage1Example>> = queries
            .par_iter()
            .map(|ctx| {
                if cfg.stage1_all_rounds {
                    stage1_rollout_examples(oracle, ctx, cfg.budget)
                } else {
                    stage1_example(oracle, ctx).map(|e| vec![e])
                }
            })
            .collect::<Result<_>>()?;
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.stage1_lr,
                ..cfg.adam
            },
            params.len(),
        );
        let mut cycler = BatchCycler::new(queries, rng.random());
        for step in 0..cfg.stage1_steps {
            let batch: Vec<Stage1Example> = cycler
                .next_indices(cfg.batch_queries)
                .into_iter()
                .flat_map(|i| examples[i].iter().cloned())
                .collect();
            let loss = stage1_step_on(params, &batch, &mut adam)?;
            log(&TrainLogEntry::Stage1 { step, loss });
        }
    }

    let mut adam = Adam::new(cfg.adam, params.len());
    let mut cycler = BatchCycler::new(queries, rng.random());
    for iter in 0..cfg.stage2_iters {
        let reference = ReferenceSnapshot::take(params);
        for update in 0..cfg.stage2_updates_per_iter {
            let batch: Vec<QueryContext> = cycler
                .next_indices(cfg.batch_queries)
                .into_iter()
                .map(|i| queries[i].clone())
                .collect();
            match rpo_update(params, &reference, &batch, oracle, cfg, &mut adam, &mut rng) {
                Ok(stats) => log(&TrainLogEntry::Stage2 { iter, update, stats }),
                Err(RsdError::NonFiniteGradient) => log(&TrainLogEntry::Skipped {
                    iter,
                    update,
                    reason: "non-finite gradient".into(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
