//! The target ranker.
//!
//! An [`Oracle`] encodes a full candidate ranking in one pass and returns the
//! next-item distribution for every prefix length. Serving code reaches the
//! oracle only through [`encode_ranking`], which charges a [`BudgetLedger`].

mod cost;
mod http;
mod synthetic;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};
use crate::numeric;
use crate::ranking::Ranking;

pub use cost::{estimate_cost, ComplexityEstimate};
pub use http::HttpOracle;
pub use synthetic::{SyntheticConfig, SyntheticOracle, SyntheticOracleParams};
pub use trace::{load_trace_oracle, RecordingOracle, TraceOracle, TRACE_FORMAT, TRACE_VERSION};

/// One query with `candidate_count` items to rank.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryContext {
    pub query_id: String,
    pub candidate_count: usize,
    pub seed: u64,
}

impl QueryContext {
    pub fn new(query_id: impl Into<String>, candidate_count: usize, seed: u64) -> Self {
        Self {
            query_id: query_id.into(),
            candidate_count,
            seed,
        }
    }
}

/// `K x K` next-item probabilities from one encoding.
///
/// Row `m` is the distribution over candidates given the first `m` items of
/// the encoded ranking; columns are in canonical item order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct EncodingMatrix {
    k: usize,
    probs: Vec<f64>,
}

impl EncodingMatrix {
    /// Builds a matrix from row-major probabilities.
    pub fn from_rows(k: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != k * k {
            return Err(RsdError::Dimension {
                expected: k * k,
                got: probs.len(),
            });
        }
        Ok(Self { k, probs })
    }

    /// Masked softmax of raw logits: row `m` is renormalised over the items
    /// not yet placed by `sigma[..m]`.
    pub fn from_logits(sigma: &Ranking, logits: &[f64]) -> Result<Self> {
        let k = sigma.len();
        if logits.len() != k * k {
            return Err(RsdError::Dimension {
                expected: k * k,
                got: logits.len(),
            });
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(RsdError::MalformedResponse("non-finite logit".into()));
        }
        let mut placed = vec![false; k];
        let mut probs = Vec::with_capacity(k * k);
        for m in 0..k {
            if m > 0 {
                placed[sigma.item(m - 1)] = true;
            }
            probs.extend(numeric::masked_softmax(&logits[m * k..(m + 1) * k], &placed, 1.0));
        }
        Ok(Self { k, probs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.probs[m * self.k..(m + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Checks row sums and the no-repeat zeros against the encoded ranking.
    pub fn check_against(&self, sigma: &Ranking, tol: f64) -> Result<()> {
        let mut placed = vec![false; self.k];
        for m in 0..self.k {
            if m > 0 {
                placed[sigma.item(m - 1)] = true;
            }
            let row = self.row(m);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol || row.iter().any(|&p| p < 0.0) {
                return Err(RsdError::MalformedResponse(format!("row {m} sums to {sum}")));
            }
            if row.iter().zip(&placed).any(|(&p, &used)| used && p != 0.0) {
                return Err(RsdError::MalformedResponse(format!(
                    "row {m} assigns mass to a placed item"
                )));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for EncodingMatrix {
    type Error = RsdError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(RsdError::Dimension {
                expected: k,
                got: bad.len(),
            });
        }
        Self::from_rows(k, rows.into_iter().flatten().collect())
    }
}

impl From<EncodingMatrix> for Vec<Vec<f64>> {
    fn from(m: EncodingMatrix) -> Self {
        m.probs.chunks(m.k).map(<[f64]>::to_vec).collect()
    }
}

/// Serving-time encoding allowance for one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub budget: usize,
    pub used: usize,
}

impl BudgetLedger {
    pub fn new(budget: usize) -> Self {
        Self { budget, used: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    pub fn is_exhausted(&self) -> bool {
        self.used >= self.budget
    }
}

/// A target ranker queried one full ranking at a time.
///
/// Implementations must be deterministic in `(ctx, sigma)` and return rows
/// that sum to one with zero mass on already-placed items.
pub trait Oracle: Send + Sync {
    /// Encodes `sigma` without any budget accounting.
    fn encode(&self, ctx: &QueryContext, sigma: &Ranking) -> Result<EncodingMatrix>;

    /// Greedy autoregressive ranking. Unbudgeted: a label generator only.
    fn target_ranking(&self, ctx: &QueryContext) -> Result<Ranking> {
        greedy_rollout(self, ctx)
    }

    /// Next-item distribution for the empty prefix.
    fn first_token_distribution(&self, ctx: &QueryContext) -> Result<Vec<f64>> {
        let s = self.encode(ctx, &Ranking::identity(ctx.candidate_count))?;
        Ok(s.row(0).to_vec())
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn encode(&self, ctx: &QueryContext, sigma: &Ranking) -> Result<EncodingMatrix> {
        (**self).encode(ctx, sigma)
    }

    fn target_ranking(&self, ctx: &QueryContext) -> Result<Ranking> {
        (**self).target_ranking(ctx)
    }

    fn first_token_distribution(&self, ctx: &QueryContext) -> Result<Vec<f64>> {
        (**self).first_token_distribution(ctx)
    }
}

/// Budgeted encoding. The ledger is checked before the oracle is touched and
/// charged only when the call succeeds.
pub fn encode_ranking<O: Oracle + ?Sized>(
    oracle: &O,
    ctx: &QueryContext,
    sigma: &Ranking,
    ledger: &mut BudgetLedger,
) -> Result<EncodingMatrix> {
    if sigma.len() != ctx.candidate_count {
        return Err(RsdError::Dimension {
            expected: ctx.candidate_count,
            got: sigma.len(),
        });
    }
    if ledger.is_exhausted() {
        return Err(RsdError::BudgetExceeded {
            budget: ledger.budget,
            used: ledger.used,
        });
    }
    let s = oracle.encode(ctx, sigma)?;
    if s.k() != ctx.candidate_count {
        return Err(RsdError::Dimension {
            expected: ctx.candidate_count,
            got: s.k(),
        });
    }
    ledger.used += 1;
    Ok(s)
}

/// Greedy rollout through generic encodings. Each encoding completes the
/// current prefix with the remaining items in index order, and every row
/// whose completion item matches the greedy choice is consumed before
/// re-encoding.
fn greedy_rollout<O: Oracle + ?Sized>(oracle: &O, ctx: &QueryContext) -> Result<Ranking> {
    let k = ctx.candidate_count;
    let mut prefix: Vec<usize> = Vec::with_capacity(k);
    let mut placed = vec![false; k];
    while prefix.len() < k {
        let mut order = prefix.clone();
        order.extend((0..k).filter(|&j| !placed[j]));
        let sigma = Ranking::new(order)?;
        let s = oracle.encode(ctx, &sigma)?;
        loop {
            let m = prefix.len();
            let next = numeric::argmax_unplaced(s.row(m), &placed)
                .ok_or_else(|| RsdError::MalformedResponse(format!("row {m} has no mass")))?;
            placed[next] = true;
            prefix.push(next);
            if prefix.len() == k || sigma.item(m) != next {
                break;
            }
        }
    }
    Ranking::new(prefix)
}
