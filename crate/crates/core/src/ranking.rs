//! Permutations of candidate items and rank-similarity metrics.
//!
//! A [`Ranking`] stores items in rank order, 0-based: `order[p]` is the item
//! placed at position `p`. Metric formulas are written over 1-based rank
//! vectors, so the conversion to [`RankVector`] lives only inside this module.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};

/// A strict total order over `K >= 2` candidate items.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Ranking(Vec<usize>);

impl Ranking {
    /// Validates that `order` is a permutation of `0..order.len()`.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let k = order.len();
        if k < 2 {
            return Err(RsdError::InvalidRanking(format!(
                "need at least 2 items, got {k}"
            )));
        }
        let mut seen = vec![false; k];
        for &item in &order {
            if item >= k {
                return Err(RsdError::InvalidRanking(format!(
                    "item {item} out of range for K={k}"
                )));
            }
            if std::mem::replace(&mut seen[item], true) {
                return Err(RsdError::InvalidRanking(format!("item {item} repeated")));
            }
        }
        Ok(Self(order))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn reversed(k: usize) -> Self {
        Self((0..k).rev().collect())
    }

    /// Items sorted by score descending; ties go to the lower item index.
    pub fn argsort_desc(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self(order)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Item at rank position `p`.
    pub fn item(&self, p: usize) -> usize {
        self.0[p]
    }

    pub fn rank_vector(&self) -> RankVector {
        let mut rank_of = vec![0; self.0.len()];
        for (pos, &item) in self.0.iter().enumerate() {
            rank_of[item] = pos + 1;
        }
        RankVector(rank_of)
    }

    /// Number of leading positions on which `self` and `other` agree.
    pub fn prefix_agreement(&self, other: &Ranking) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .take_while(|(a, b)| a == b)
            .count()
    }
}

impl TryFrom<Vec<usize>> for Ranking {
    type Error = RsdError;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Self::new(order)
    }
}

impl From<Ranking> for Vec<usize> {
    fn from(r: Ranking) -> Self {
        r.0
    }
}

/// 1-based rank positions indexed by item: `rank_of[item]` is in `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// All four similarity measures between a prediction and its target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kt: f64,
    pub sr: f64,
    pub fd: u64,
    pub kd: u64,
}

impl MetricReport {
    pub fn compare(predicted: &Ranking, target: &Ranking) -> Result<Self> {
        Ok(Self {
            kt: kendall_tau(predicted, target)?,
            sr: spearman_rho(predicted, target)?,
            fd: footrule(predicted, target)?,
            kd: kemeny(predicted, target)?,
        })
    }
}

fn ranks(a: &Ranking, b: &Ranking) -> Result<(RankVector, RankVector)> {
    if a.len() != b.len() {
        return Err(RsdError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok((a.rank_vector(), b.rank_vector()))
}

fn pair_count(k: usize) -> usize {
    k * (k - 1) / 2
}

/// Concordant and discordant item-pair counts.
fn pair_agreement(ra: &RankVector, rb: &RankVector) -> (usize, usize) {
    let (ra, rb) = (ra.as_slice(), rb.as_slice());
    let mut concordant = 0;
    let mut discordant = 0;
    for i in 0..ra.len() {
        for j in (i + 1)..ra.len() {
            if (ra[i] < ra[j]) == (rb[i] < rb[j]) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    (concordant, discordant)
}

/// Kendall's tau, `(C - D) / (K(K-1)/2)`.
pub fn kendall_tau(a: &Ranking, b: &Ranking) -> Result<f64> {
    let (ra, rb) = ranks(a, b)?;
    let (c, d) = pair_agreement(&ra, &rb);
    Ok((c as f64 - d as f64) / pair_count(a.len()) as f64)
}

/// Spearman's rho, `1 - 6 sum d^2 / (K(K^2-1))`.
pub fn spearman_rho(a: &Ranking, b: &Ranking) -> Result<f64> {
    let (ra, rb) = ranks(a, b)?;
    let sum_sq: usize = ra
        .as_slice()
        .iter()
        .zip(rb.as_slice())
        .map(|(&x, &y)| x.abs_diff(y).pow(2))
        .sum();
    let k = a.len() as f64;
    Ok(1.0 - 6.0 * sum_sq as f64 / (k * (k * k - 1.0)))
}

/// Spearman footrule, the summed absolute rank displacement.
pub fn footrule(a: &Ranking, b: &Ranking) -> Result<u64> {
    let (ra, rb) = ranks(a, b)?;
    Ok(ra
        .as_slice()
        .iter()
        .zip(rb.as_slice())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum())
}

/// Kemeny distance, the number of item pairs ordered oppositely.
pub fn kemeny(a: &Ranking, b: &Ranking) -> Result<u64> {
    let (ra, rb) = ranks(a, b)?;
    Ok(pair_agreement(&ra, &rb).1 as u64)
}

/// Episode return: Spearman's rho of the final ranking against the target.
pub fn episode_reward(predicted: &Ranking, target: &Ranking) -> Result<f64> {
    spearman_rho(predicted, target)
}
