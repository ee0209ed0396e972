//! Closed-form decoding cost of budgeted, autoregressive and classic
//! speculative ranking.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub prompt_tokens: u64,
    pub candidates: u64,
    pub budget: u64,
    pub model_dim: f64,
    pub with_kv_cache: bool,
    pub rsd_cost: f64,
    pub autoregressive_cost: f64,
    /// Classic speculative decoding with as many encodings as the budget.
    pub sd_cost: f64,
}

/// Without a KV cache each encoding re-attends the full `M + K` sequence:
/// `T (M+K)^2 o` against `[M^2 + sum_k (K+k)^2] o`. With a cache the
/// incremental costs are `T (M+K) o` and `sum_k (K+k) o`.
pub fn estimate_cost(
    prompt_tokens: u64,
    candidates: u64,
    budget: u64,
    model_dim: f64,
    with_kv_cache: bool,
) -> ComplexityEstimate {
    let m = prompt_tokens as f64;
    let k = candidates as f64;
    let t = budget as f64;
    let steps = (1..=candidates).map(|i| k + i as f64);
    let (per_encoding, autoregressive) = if with_kv_cache {
        (m + k, steps.sum::<f64>())
    } else {
        ((m + k).powi(2), m * m + steps.map(|x| x * x).sum::<f64>())
    };
    ComplexityEstimate {
        prompt_tokens,
        candidates,
        budget,
        model_dim,
        with_kv_cache,
        rsd_cost: t * per_encoding * model_dim,
        autoregressive_cost: autoregressive * model_dim,
        sd_cost: t * per_encoding * model_dim,
    }
}
