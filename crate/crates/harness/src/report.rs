//! Text and CSV tables for the variance experiment and the cost model.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use rsd_core::oracle::{estimate_cost, ComplexityEstimate};
use rsd_core::trainer::theory::{variance_experiment, VarianceExpConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceRow {
    pub sigma_delta: f64,
    pub var_ref: f64,
    pub theory_ref: f64,
    pub var_group: f64,
    pub theory_group: f64,
    /// Which advantage the theory says has lower variance.
    pub lower: &'static str,
}

/// Sweeps `sigma_delta` across the crossover `sigma_w / sqrt(G - 1)`.
pub fn variance_table(group_size: usize, n_samples: usize, seed: u64) -> Result<Vec<VarianceRow>> {
    let sigma_w = 1.0;
    let boundary = sigma_w / ((group_size - 1) as f64).sqrt();
    [0.0, 0.5, 1.0, 1.5, 2.0]
        .into_iter()
        .map(|f| {
            let cfg = VarianceExpConfig {
                sigma_b: 1.0,
                sigma_w,
                sigma_delta: f * boundary,
                group_size,
                n_samples,
                seed,
            };
            let r = variance_experiment(&cfg)?;
            let lower = if (r.theory_ref - r.theory_group).abs() < 1e-12 {
                "equal"
            } else if r.theory_ref < r.theory_group {
                "reference"
            } else {
                "group"
            };
            Ok(VarianceRow {
                sigma_delta: cfg.sigma_delta,
                var_ref: r.var_ref,
                theory_ref: r.theory_ref,
                var_group: r.var_group,
                theory_group: r.theory_group,
                lower,
            })
        })
        .collect()
}

pub fn format_variance(rows: &[VarianceRow]) -> String {
    let mut s = format!(
        "{:>11} {:>10} {:>10} {:>10} {:>10}  lower\n",
        "sigma_delta", "var_ref", "theory", "var_group", "theory"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>11.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}  {}",
            r.sigma_delta, r.var_ref, r.theory_ref, r.var_group, r.theory_group, r.lower
        );
    }
    s
}

pub fn write_variance_csv(rows: &[VarianceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cost_table(prompt_tokens: u64, k: u64, budget: u64, model_dim: f64) -> [ComplexityEstimate; 2] {
    [
        estimate_cost(prompt_tokens, k, budget, model_dim, false),
        estimate_cost(prompt_tokens, k, budget, model_dim, true),
    ]
}

pub fn format_cost(rows: &[ComplexityEstimate]) -> String {
    let mut s = format!(
        "{:>9} {:>6} {:>4} {:>4} {:>8} {:>14} {:>14} {:>14}\n",
        "kv_cache", "M", "K", "T", "o", "rsd", "autoregressive", "sd"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>9} {:>6} {:>4} {:>4} {:>8} {:>14} {:>14} {:>14}",
            r.with_kv_cache,
            r.prompt_tokens,
            r.candidates,
            r.budget,
            r.model_dim,
            r.rsd_cost,
            r.autoregressive_cost,
            r.sd_cost
        );
    }
    s
}
