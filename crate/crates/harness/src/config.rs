//! Experiment configuration, read from one TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rsd_core::oracle::{load_trace_oracle, HttpOracle, Oracle, SyntheticConfig, SyntheticOracle};
use rsd_core::policy::PolicyConfig;
use rsd_core::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Std,
    Gsd,
    Rsd,
    RsdMlp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Std, Method::Gsd, Method::Rsd, Method::RsdMlp];

    pub fn name(self) -> &'static str {
        match self {
            Method::Std => "std",
            Method::Gsd => "gsd",
            Method::Rsd => "rsd",
            Method::RsdMlp => "rsd-mlp",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Rsd | Method::RsdMlp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .with_context(|| format!("unknown method {s:?} (expected std, gsd, rsd or rsd-mlp)"))
    }
}

/// Where encodings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleSpec {
    Synthetic(SyntheticConfig),
    Trace { path: PathBuf },
    Http {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Synthetic(SyntheticConfig::default())
    }
}

impl OracleSpec {
    pub fn build(&self, k: usize) -> Result<Box<dyn Oracle>> {
        Ok(match self {
            OracleSpec::Synthetic(c) => {
                if c.k != k {
                    bail!("oracle k = {} but experiment k = {k}", c.k);
                }
                Box::new(SyntheticOracle::new(c.clone()))
            }
            OracleSpec::Trace { path } => {
                let trace = load_trace_oracle(path)
                    .with_context(|| format!("loading trace {}", path.display()))?;
                if trace.k() != k {
                    bail!("trace k = {} but experiment k = {k}", trace.k());
                }
                Box::new(trace)
            }
            OracleSpec::Http { endpoint, timeout_ms } => Box::new(HttpOracle::new(endpoint.clone(), *timeout_ms)),
        })
    }
}

/// Shape of the learned drafters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySettings {
    /// Transformer width; `K` rounded up to a multiple of `n_heads` when unset.
    pub d_model: Option<usize>,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub focus_prior: bool,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            d_model: None,
            n_heads: 5,
            mlp_hidden: 64,
            focus_prior: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub k: usize,
    /// Encoding budget for `eval` and for training rollouts.
    pub budget: usize,
    /// Total queries; the last `val_queries` are validation, the
    /// `test_queries` before them are test, the rest are training.
    pub queries: usize,
    pub val_queries: usize,
    pub test_queries: usize,
    /// Training repetitions with seeds `seed, seed + 1, ...`.
    pub runs: usize,
    pub methods: Vec<Method>,
    /// Budgets visited by `sweep`.
    pub budgets: Vec<usize>,
    pub out_dir: PathBuf,
    /// Also record the encodings made while generating the dataset.
    pub write_trace: bool,
    pub prompt_tokens: u64,
    pub model_dim: f64,
    pub variance_samples: usize,
    pub oracle: OracleSpec,
    pub policy: PolicySettings,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 20,
            budget: 5,
            queries: 2000,
            val_queries: 200,
            test_queries: 200,
            runs: 5,
            methods: vec![Method::Std, Method::Gsd, Method::Rsd],
            budgets: (1..=20).collect(),
            out_dir: PathBuf::from("runs/default"),
            write_trace: false,
            prompt_tokens: 100,
            model_dim: 1.0,
            variance_samples: 1_000_000,
            oracle: OracleSpec::default(),
            policy: PolicySettings::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn train_queries(&self) -> usize {
        self.queries.saturating_sub(self.val_queries + self.test_queries)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            bail!("k must be at least 2");
        }
        if self.budget == 0 || self.budgets.contains(&0) {
            bail!("budgets must be at least 1");
        }
        if self.test_queries == 0 {
            bail!("test split is empty");
        }
        if self.val_queries + self.test_queries > self.queries {
            bail!(
                "{} validation + {} test queries exceed the {} total",
                self.val_queries,
                self.test_queries,
                self.queries
            );
        }
        if self.methods.iter().any(|m| m.is_learned()) && self.train_queries() == 0 {
            bail!("learned methods need training queries");
        }
        if self.runs == 0 {
            bail!("runs must be at least 1");
        }
        if let OracleSpec::Synthetic(c) = &self.oracle {
            if c.k != self.k {
                bail!("oracle k = {} but experiment k = {}", c.k, self.k);
            }
        }
        self.train_config(0).validate()?;
        Ok(())
    }

    /// Training settings for run `run`, with the experiment budget.
    pub fn train_config(&self, run: usize) -> TrainConfig {
        TrainConfig {
            budget: self.budget,
            seed: self.seed.wrapping_add(run as u64),
            ..self.train.clone()
        }
    }

    /// Round capacity of the learned drafters: enough for every budget used
    /// by `eval` and `sweep`, so one checkpoint serves both.
    pub fn policy_capacity(&self) -> usize {
        self.budgets.iter().copied().chain([self.budget]).max().unwrap_or(1)
    }

    pub fn policy_config(&self, method: Method) -> Result<PolicyConfig> {
        let cap = self.policy_capacity();
        let mut pc = match method {
            Method::Rsd => {
                let mut pc = PolicyConfig::for_candidates(self.k, cap);
                let heads = self.policy.n_heads;
                let d = self.policy.d_model.unwrap_or_else(|| self.k.div_ceil(heads) * heads);
                pc.n_heads = heads;
                pc.d_model = d;
                pc.ff_dim = 2 * d;
                pc
            }
            Method::RsdMlp => PolicyConfig::mlp(self.k, self.policy.mlp_hidden, cap),
            other => bail!("{other} has no policy"),
        };
        pc.focus_prior = self.policy.focus_prior;
        pc.validate()?;
        Ok(pc)
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{p:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        assert_eq!(ExperimentConfig::default().train_queries(), 1600);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let cfg = ExperimentConfig {
            queries: 300,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn oracle_k_must_match() {
        let cfg = ExperimentConfig {
            k: 10,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_partial_tables() {
        let text = r#"
            k = 8
            budget = 3
            methods = ["std", "rsd-mlp"]

            [oracle]
            kind = "synthetic"
            k = 8
            interaction_scale = 1.0

            [train]
            group_size = 4
            advantage_mode = "group"
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.methods, vec![Method::Std, Method::RsdMlp]);
        assert_eq!(cfg.train.group_size, 4);
        assert_eq!(cfg.train.beta_kl, TrainConfig::default().beta_kl);
        let OracleSpec::Synthetic(s) = &cfg.oracle else { panic!() };
        assert_eq!(s.interaction_scale, 1.0);
        assert_eq!(s.temperature, 1.0);
        cfg.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn method_lists_parse() {
        let m: Vec<Method> = parse_list("std, gsd,rsd-mlp").unwrap();
        assert_eq!(m, vec![Method::Std, Method::Gsd, Method::RsdMlp]);
        assert!(parse_list::<Method>("beam").is_err());
        assert_eq!(parse_list::<usize>("1,2,5").unwrap(), vec![1, 2, 5]);
    }

    #[test]
    fn capacity_covers_every_budget() {
        let cfg = ExperimentConfig {
            budget: 5,
            budgets: vec![1, 3, 9],
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.policy_capacity(), 9);
        assert_eq!(cfg.policy_config(Method::Rsd).unwrap().max_rounds, 9);
        assert!(cfg.policy_config(Method::Gsd).is_err());
    }
}
