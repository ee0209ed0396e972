//! The drafting policy.
//!
//! A relevance network maps the history of encodings seen so far to one score
//! per candidate. Rankings are scored with the Bradley-Terry pairwise product
//! over those scores and drafted with a Gumbel-perturbed sort.
//!
//! Parameters live in one flat `f64` vector; [`layout`] names the segments.
//! Gradients share that layout, so the optimiser and the checkpoint format
//! never need to know the network structure.

mod checkpoint;
mod layout;
mod mlp;
mod permutation;
mod transformer;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};
use crate::numeric;
use crate::oracle::EncodingMatrix;
use crate::ranking::Ranking;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layout::{Layout, Segment};
pub use permutation::{
    bt_log_prob, bt_log_prob_grad, bt_suffix_log_prob, bt_suffix_log_prob_grad, greedy_tail, pl_suffix_log_prob,
    pl_suffix_log_prob_grad, sample_tail, Likelihood,
};

/// Which relevance head scores the candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Attention over every row of every encoding in the history.
    Transformer,
    /// Two-layer perceptron over the rejection row of the latest encoding.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Longest history the round embeddings cover.
    pub max_rounds: usize,
    /// Add the log of the rejection row to the logits, so the network
    /// learns a correction to greedy drafting.
    #[serde(default)]
    pub focus_prior: bool,
}

impl PolicyConfig {
    /// One layer, five heads, hidden width `K` rounded up to a multiple of
    /// the head count.
    pub fn for_candidates(k: usize, max_rounds: usize) -> Self {
        let n_heads = 5;
        let d_model = k.div_ceil(n_heads) * n_heads;
        Self {
            kind: PolicyKind::Transformer,
            k,
            d_model,
            n_heads,
            ff_dim: 2 * d_model,
            max_rounds,
            focus_prior: true,
        }
    }

    pub fn mlp(k: usize, hidden: usize, max_rounds: usize) -> Self {
        Self {
            kind: PolicyKind::Mlp,
            k,
            d_model: hidden,
            n_heads: 1,
            ff_dim: hidden,
            max_rounds,
            focus_prior: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d_model == 0 || self.n_heads == 0 || self.max_rounds == 0 {
            return Err(RsdError::Config(format!("degenerate policy shape {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(RsdError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Ordered `(ranking, encoding)` pairs observed so far in an episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodingHistory {
    rounds: Vec<(Ranking, EncodingMatrix)>,
}

impl EncodingHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sigma: Ranking, s: EncodingMatrix) {
        self.rounds.push((sigma, s));
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn rounds(&self) -> &[(Ranking, EncodingMatrix)] {
        &self.rounds
    }

    pub fn last(&self) -> Option<&(Ranking, EncodingMatrix)> {
        self.rounds.last()
    }

    /// The first `n` rounds.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            rounds: self.rounds[..n].to_vec(),
        }
    }
}

/// Softmax-normalised candidate scores together with their logits.
///
/// Permutation likelihoods and the drafting sampler use `logits`, which are
/// `log(probs)` up to an additive constant.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl RelevanceScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = numeric::softmax(&logits);
        Self { logits, probs }
    }
}

/// Floor for log-probabilities of items with zero probability.
pub const LOG_FLOOR: f64 = -30.0;

/// Network input for one encoding row: log-probabilities of the items still
/// unplaced at that row, centred to zero mean; placed items read 0.
pub fn row_features(row: &[f64]) -> Vec<f64> {
    let live: Vec<f64> = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p.ln().max(LOG_FLOOR))
        .collect();
    let mean = if live.is_empty() { 0.0 } else { live.iter().sum::<f64>() / live.len() as f64 };
    row.iter()
        .map(|&p| if p > 0.0 { p.ln().max(LOG_FLOOR) - mean } else { 0.0 })
        .collect()
}

/// Log of a rejection row, floored at [`LOG_FLOOR`].
pub fn focus_prior(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&p| if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR })
        .collect()
}

/// Activations cached by a forward pass.
#[derive(Clone, Debug)]
pub enum ForwardTape {
    Transformer(Box<transformer::Tape>),
    Mlp(Box<mlp::Tape>),
}

/// Gradient with the same layout as [`PolicyParams::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradient(pub Vec<f64>);

impl PolicyGradient {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn add_scaled(&mut self, other: &PolicyGradient, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        numeric::l2_norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Relevance-network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    layout: Layout,
    pub values: Vec<f64>,
}

impl PolicyParams {
    /// Linear maps uniform in `+-1/sqrt(fan_in)`, biases zero, layer-norm
    /// gains one, embeddings `N(0, 0.02^2)`.
    pub fn init<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut values = vec![0.0; layout.len()];
        let emb = Normal::new(0.0, 0.02).expect("valid normal");
        for seg in layout.segments() {
            let slot = &mut values[seg.range()];
            match seg.role {
                layout::Role::Weight => {
                    let bound = 1.0 / (seg.rows as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    slot.iter_mut().for_each(|v| *v = dist.sample(rng));
                }
                layout::Role::Embedding => slot.iter_mut().for_each(|v| *v = emb.sample(rng)),
                layout::Role::Gain => slot.fill(1.0),
                layout::Role::Bias => slot.fill(0.0),
            }
        }
        if config.focus_prior {
            // start as the greedy drafter
            values[layout.get("out_w").range()].fill(0.0);
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn from_values(config: PolicyConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if values.len() != layout.len() {
            return Err(RsdError::Dimension {
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        &self.values[self.layout.get(name).range()]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.layout.get(name).range();
        &mut self.values[range]
    }

    /// Scores the candidates. `focus_row` is the rejection row of the latest
    /// encoding; only the perceptron head reads it.
    pub fn forward(
        &self,
        history: &EncodingHistory,
        focus_row: usize,
    ) -> Result<(RelevanceScores, ForwardTape)> {
        if history.is_empty() {
            return Err(RsdError::Config("empty encoding history".into()));
        }
        if let Some((_, bad)) = history.rounds().iter().find(|(_, s)| s.k() != self.config.k) {
            return Err(RsdError::Dimension {
                expected: self.config.k,
                got: bad.k(),
            });
        }
        match self.config.kind {
            PolicyKind::Transformer => {
                if history.len() > self.config.max_rounds {
                    return Err(RsdError::Capacity {
                        rounds: history.len(),
                        capacity: self.config.max_rounds,
                    });
                }
                let (scores, tape) = transformer::forward(self, history);
                Ok((scores, ForwardTape::Transformer(Box::new(tape))))
            }
            PolicyKind::Mlp => {
                let row = focus_row.min(self.config.k - 1);
                let (scores, tape) = mlp::forward(self, history, row);
                Ok((scores, ForwardTape::Mlp(Box::new(tape))))
            }
        }
        .map(|(scores, tape)| {
            if !self.config.focus_prior {
                return (scores, tape);
            }
            let (_, s) = history.last().expect("non-empty history");
            let prior = focus_prior(s.row(focus_row.min(self.config.k - 1)));
            let logits = scores.logits.iter().zip(&prior).map(|(a, b)| a + b).collect();
            (RelevanceScores::from_logits(logits), tape)
        })
    }

    pub fn scores(&self, history: &EncodingHistory, focus_row: usize) -> Result<RelevanceScores> {
        Ok(self.forward(history, focus_row)?.0)
    }

    /// Reverse-mode gradient given `d objective / d logits`.
    pub fn backward(&self, tape: &ForwardTape, d_logits: &[f64]) -> Result<PolicyGradient> {
        if d_logits.len() != self.config.k {
            return Err(RsdError::Dimension {
                expected: self.config.k,
                got: d_logits.len(),
            });
        }
        let mut grad = PolicyGradient::zeros(self.len());
        match (tape, self.config.kind) {
            (ForwardTape::Transformer(t), PolicyKind::Transformer) => {
                transformer::backward(self, t, d_logits, &mut grad.0)
            }
            (ForwardTape::Mlp(t), PolicyKind::Mlp) => mlp::backward(self, t, d_logits, &mut grad.0),
            _ => return Err(RsdError::Config("tape does not match policy kind".into())),
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests;
