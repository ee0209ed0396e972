//! Up-to-down speculative decoding.
//!
//! Each encoding of the current draft tells us the longest prefix that
//! greedy autoregressive decoding would also have produced. That prefix is
//! kept, the greedy item for the next slot is read off the same encoding, and
//! the rest of the ranking is redrafted. Every draft therefore fixes at least
//! one more leading position than the one before it.

use rand::{Rng, SeedableRng};

use crate::error::{Result, RsdError};
use crate::numeric;
use crate::oracle::{encode_ranking, BudgetLedger, EncodingMatrix, Oracle, QueryContext};
use crate::policy::{bt_suffix_log_prob, greedy_tail, sample_tail, EncodingHistory, PolicyParams};
use crate::ranking::Ranking;

/// Outcome of checking a ranking against its own encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyResult {
    /// Last position of the greedy-consistent prefix; `-1` when position 0
    /// already disagrees.
    pub i_star: isize,
    /// Greedy item for position `i_star + 1`; `None` once fully consistent.
    pub greedy_next: Option<usize>,
}

impl VerifyResult {
    pub fn is_fully_consistent(&self, k: usize) -> bool {
        self.i_star == k as isize - 1
    }

    /// Length of the kept prefix, `i_star + 1`.
    pub fn kept(&self) -> usize {
        (self.i_star + 1) as usize
    }
}

pub fn verify(sigma_prev: &Ranking, s_prev: &EncodingMatrix) -> Result<VerifyResult> {
    let k = sigma_prev.len();
    if s_prev.k() != k {
        return Err(RsdError::Dimension {
            expected: k,
            got: s_prev.k(),
        });
    }
    let mut placed = vec![false; k];
    for j in 0..k {
        let greedy = numeric::argmax_unplaced(s_prev.row(j), &placed)
            .ok_or_else(|| RsdError::MalformedResponse(format!("row {j} has no unplaced item")))?;
        if greedy != sigma_prev.item(j) {
            return Ok(VerifyResult {
                i_star: j as isize - 1,
                greedy_next: Some(greedy),
            });
        }
        placed[greedy] = true;
    }
    Ok(VerifyResult {
        i_star: k as isize - 1,
        greedy_next: None,
    })
}

/// How the positions after the forced slot are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailMode {
    /// Gumbel-perturbed sort of the scores.
    Sampled,
    /// Descending sort of the scores.
    Greedy,
}

/// Builds the next draft: the verified prefix, then the greedy item, then a
/// tail ordered by `scores`.
pub fn construct_next<R: Rng + ?Sized>(
    sigma_prev: &Ranking,
    verdict: &VerifyResult,
    scores: &[f64],
    mode: TailMode,
    rng: &mut R,
) -> Ranking {
    let Some(next) = verdict.greedy_next else {
        return sigma_prev.clone();
    };
    let mut prefix = sigma_prev.as_slice()[..verdict.kept()].to_vec();
    prefix.push(next);
    match mode {
        TailMode::Sampled => sample_tail(scores, &prefix, rng),
        TailMode::Greedy => greedy_tail(scores, &prefix),
    }
}

/// Source of tail scores for each redraft.
pub trait Drafter {
    /// Scores for every candidate given the encodings seen so far.
    /// `focus_row` is `i_star + 1` of the latest verification.
    fn tail_scores(&self, history: &EncodingHistory, focus_row: usize) -> Result<Vec<f64>>;

    fn mode(&self) -> TailMode;
}

/// Learned relevance network.
#[derive(Clone, Copy, Debug)]
pub struct PolicyDrafter<'a> {
    pub params: &'a PolicyParams,
    pub mode: TailMode,
    /// Logits are divided by this before drafting.
    pub temperature: f64,
}

impl<'a> PolicyDrafter<'a> {
    pub fn greedy(params: &'a PolicyParams) -> Self {
        Self { params, mode: TailMode::Greedy, temperature: 1.0 }
    }

    pub fn sampled(params: &'a PolicyParams, temperature: f64) -> Self {
        Self { params, mode: TailMode::Sampled, temperature }
    }
}

impl Drafter for PolicyDrafter<'_> {
    fn tail_scores(&self, history: &EncodingHistory, focus_row: usize) -> Result<Vec<f64>> {
        let logits = self.params.scores(history, focus_row)?.logits;
        Ok(logits.into_iter().map(|z| z / self.temperature).collect())
    }

    fn mode(&self) -> TailMode {
        self.mode
    }
}

/// Greedy speculative decoding: the tail is sorted by the rejection row.
#[derive(Clone, Copy, Debug, Default)]
pub struct RejectionRowDrafter;

impl Drafter for RejectionRowDrafter {
    fn tail_scores(&self, history: &EncodingHistory, focus_row: usize) -> Result<Vec<f64>> {
        let (_, s) = history.last().expect("non-empty history");
        Ok(s.row(focus_row).to_vec())
    }

    fn mode(&self) -> TailMode {
        TailMode::Greedy
    }
}

/// Uniformly random tails.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformDrafter;

impl Drafter for UniformDrafter {
    fn tail_scores(&self, history: &EncodingHistory, _: usize) -> Result<Vec<f64>> {
        let k = history.last().expect("non-empty history").1.k();
        Ok(vec![0.0; k])
    }

    fn mode(&self) -> TailMode {
        TailMode::Sampled
    }
}

/// One redraft made by the drafter.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftRound {
    /// Number of encodings the drafter saw.
    pub history_len: usize,
    pub focus_row: usize,
    /// Leading positions fixed before drafting: the consistent prefix and
    /// the greedy item.
    pub fixed: usize,
    pub ranking: Ranking,
    /// Bradley-Terry log-likelihood of the drafted positions under the
    /// drafter's scores.
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `sigma_0` followed by every redraft, in order.
    pub rankings: Vec<Ranking>,
    /// Encodings of the drafts, starting with `sigma_0`. The identity probe
    /// is left out unless it coincides with `sigma_0`.
    pub history: EncodingHistory,
    pub rounds: Vec<DraftRound>,
    /// `i_star` of each verification, in order.
    pub i_stars: Vec<isize>,
    pub final_ranking: Ranking,
    pub ledger: BudgetLedger,
    /// Stopped because a draft was fully consistent.
    pub early_exit: bool,
    pub return_r: Option<f64>,
    pub advantage: Option<f64>,
}

impl Trajectory {
    pub fn encodings_used(&self) -> usize {
        self.ledger.used
    }
}

/// Runs one serving episode under an encoding budget of `budget`.
///
/// Call #1 encodes the identity order; its first row gives `sigma_0`, the
/// single-step ranking. With a budget of one that is the answer. Otherwise
/// `sigma_0` is encoded (reusing call #1 when it is the identity order) and
/// the verify/redraft loop runs until a draft is fully consistent or the
/// budget is spent. The last redraft is returned without being encoded.
pub fn run_episode<O, D, R>(
    oracle: &O,
    ctx: &QueryContext,
    drafter: &D,
    budget: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    O: Oracle + ?Sized,
    D: Drafter + ?Sized,
    R: Rng + ?Sized,
{
    if budget == 0 {
        return Err(RsdError::Config("budget must be at least 1".into()));
    }
    let k = ctx.candidate_count;
    let mut ledger = BudgetLedger::new(budget);
    let mut history = EncodingHistory::new();
    let mut rankings = Vec::new();
    let mut rounds = Vec::new();
    let mut i_stars = Vec::new();

    let identity = Ranking::identity(k);
    let s_identity = encode_ranking(oracle, ctx, &identity, &mut ledger)?;
    let sigma0 = Ranking::argsort_desc(s_identity.row(0));
    rankings.push(sigma0.clone());

    let finish = |final_ranking: Ranking,
                  history: EncodingHistory,
                  rankings: Vec<Ranking>,
                  rounds: Vec<DraftRound>,
                  i_stars: Vec<isize>,
                  ledger: BudgetLedger,
                  early_exit: bool| Trajectory {
        rankings,
        history,
        rounds,
        i_stars,
        final_ranking,
        ledger,
        early_exit,
        return_r: None,
        advantage: None,
    };

    if ledger.is_exhausted() {
        return Ok(finish(sigma0, history, rankings, rounds, i_stars, ledger, false));
    }

    let (mut current, mut s_current) = if sigma0 == identity {
        history.push(identity.clone(), s_identity.clone());
        (identity, s_identity)
    } else {
        let s0 = encode_ranking(oracle, ctx, &sigma0, &mut ledger)?;
        history.push(sigma0.clone(), s0.clone());
        (sigma0, s0)
    };

    loop {
        let verdict = verify(&current, &s_current)?;
        i_stars.push(verdict.i_star);
        if verdict.is_fully_consistent(k) {
            return Ok(finish(current, history, rankings, rounds, i_stars, ledger, true));
        }
        let focus_row = verdict.kept();
        let scores = drafter.tail_scores(&history, focus_row)?;
        let next = construct_next(&current, &verdict, &scores, drafter.mode(), rng);
        let fixed = (focus_row + 1).min(k);
        rounds.push(DraftRound {
            history_len: history.len(),
            focus_row,
            fixed,
            ranking: next.clone(),
            log_prob: bt_suffix_log_prob(&scores, &next, fixed),
        });
        rankings.push(next.clone());
        if ledger.is_exhausted() {
            return Ok(finish(next, history, rankings, rounds, i_stars, ledger, false));
        }
        let s_next = encode_ranking(oracle, ctx, &next, &mut ledger)?;
        history.push(next.clone(), s_next.clone());
        current = next;
        s_current = s_next;
    }
}

/// Single-step decoding: one encoding, items sorted by the first row.
pub fn run_std<O: Oracle + ?Sized>(oracle: &O, ctx: &QueryContext) -> Result<(Ranking, BudgetLedger)> {
    let mut ledger = BudgetLedger::new(1);
    let s = encode_ranking(oracle, ctx, &Ranking::identity(ctx.candidate_count), &mut ledger)?;
    Ok((Ranking::argsort_desc(s.row(0)), ledger))
}

/// Greedy speculative decoding with no learned policy.
pub fn run_gsd<O: Oracle + ?Sized>(oracle: &O, ctx: &QueryContext, budget: usize) -> Result<Trajectory> {
    // the rejection-row drafter never draws randomness
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    run_episode(oracle, ctx, &RejectionRowDrafter, budget, &mut rng)
}
