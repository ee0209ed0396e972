//! A parametric stand-in for a listwise ranking model.
//!
//! The next-item score of candidate `j` after prefix `P` is
//! `u_j + sum_{p in P} W[p, j]`, softmaxed over unplaced items at a fixed
//! temperature. The coupling matrix `W` makes each row depend on which items
//! were already ranked, not only on how many.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EncodingMatrix, Oracle, QueryContext};
use crate::error::{Result, RsdError};
use crate::numeric;
use crate::ranking::Ranking;

/// Generator for per-query oracle parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub k: usize,
    pub temperature: f64,
    /// Standard deviation of the base scores `u`.
    pub base_scale: f64,
    /// Standard deviation of the unstructured part of `W`.
    pub interaction_scale: f64,
    /// Scale of the rank-one part `a b^T` of `W`.
    pub coupling_scale: f64,
    /// Mean of `a`; a nonzero mean makes the coupling drift with depth.
    pub coupling_offset: f64,
}

impl SyntheticConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            k: 20,
            temperature: 1.0,
            base_scale: 1.0,
            interaction_scale: 0.3,
            coupling_scale: 0.0,
            coupling_offset: 0.0,
        }
    }
}

/// Concrete oracle parameters for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracleParams {
    pub base_scores: Vec<f64>,
    /// Row-major `K x K`; `interaction[p * K + j]` couples placed `p` to `j`.
    pub interaction: Vec<f64>,
    pub temperature: f64,
}

impl SyntheticOracleParams {
    pub fn new(base_scores: Vec<f64>, interaction: Vec<f64>, temperature: f64) -> Result<Self> {
        let k = base_scores.len();
        if interaction.len() != k * k {
            return Err(RsdError::Dimension {
                expected: k * k,
                got: interaction.len(),
            });
        }
        if !(temperature > 0.0) {
            return Err(RsdError::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            base_scores,
            interaction,
            temperature,
        })
    }

    pub fn k(&self) -> usize {
        self.base_scores.len()
    }

    /// Draws `u` and `W` from `config` using `seed` alone.
    pub fn sample(config: &SyntheticConfig, seed: u64) -> Self {
        let k = config.k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let base_scores = (0..k).map(|_| config.base_scale * normal()).collect();
        let a: Vec<f64> = (0..k).map(|_| config.coupling_offset + normal()).collect();
        let b: Vec<f64> = (0..k).map(|_| normal()).collect();
        let mut interaction = Vec::with_capacity(k * k);
        for p in 0..k {
            for j in 0..k {
                let noise = config.interaction_scale * normal();
                interaction.push(noise + config.coupling_scale * a[p] * b[j]);
            }
        }
        Self {
            base_scores,
            interaction,
            temperature: config.temperature,
        }
    }

    /// Next-item distribution after `prefix`.
    pub fn next_distribution(&self, prefix: &[usize]) -> Vec<f64> {
        let k = self.k();
        let mut scores = self.base_scores.clone();
        let mut placed = vec![false; k];
        for &p in prefix {
            placed[p] = true;
            for (s, w) in scores.iter_mut().zip(&self.interaction[p * k..(p + 1) * k]) {
                *s += w;
            }
        }
        numeric::masked_softmax(&scores, &placed, self.temperature)
    }
}

#[derive(Clone, Debug)]
enum Source {
    PerQuery(SyntheticConfig),
    Fixed(SyntheticOracleParams),
}

/// Synthetic target ranker. Either draws parameters per query from
/// `QueryContext::seed`, or serves one fixed parameter set for every query.
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    source: Source,
}

impl SyntheticOracle {
    pub fn new(config: SyntheticConfig) -> Self {
        Self {
            source: Source::PerQuery(config),
        }
    }

    pub fn fixed(params: SyntheticOracleParams) -> Self {
        Self {
            source: Source::Fixed(params),
        }
    }

    pub fn params_for(&self, ctx: &QueryContext) -> SyntheticOracleParams {
        match &self.source {
            Source::PerQuery(cfg) => SyntheticOracleParams::sample(cfg, ctx.seed),
            Source::Fixed(p) => p.clone(),
        }
    }

    fn checked_params(&self, ctx: &QueryContext) -> Result<SyntheticOracleParams> {
        let params = self.params_for(ctx);
        if params.k() != ctx.candidate_count {
            return Err(RsdError::Dimension {
                expected: params.k(),
                got: ctx.candidate_count,
            });
        }
        Ok(params)
    }
}

impl Oracle for SyntheticOracle {
    fn encode(&self, ctx: &QueryContext, sigma: &Ranking) -> Result<EncodingMatrix> {
        let params = self.checked_params(ctx)?;
        let k = params.k();
        if sigma.len() != k {
            return Err(RsdError::Dimension {
                expected: k,
                got: sigma.len(),
            });
        }
        let mut probs = Vec::with_capacity(k * k);
        for m in 0..k {
            probs.extend(params.next_distribution(&sigma.as_slice()[..m]));
        }
        EncodingMatrix::from_rows(k, probs)
    }

    fn target_ranking(&self, ctx: &QueryContext) -> Result<Ranking> {
        let params = self.checked_params(ctx)?;
        let k = params.k();
        let mut prefix = Vec::with_capacity(k);
        let mut placed = vec![false; k];
        while prefix.len() < k {
            let row = params.next_distribution(&prefix);
            let next = numeric::argmax_unplaced(&row, &placed).expect("unplaced item remains");
            placed[next] = true;
            prefix.push(next);
        }
        Ranking::new(prefix)
    }

    fn first_token_distribution(&self, ctx: &QueryContext) -> Result<Vec<f64>> {
        Ok(self.checked_params(ctx)?.next_distribution(&[]))
    }
}
