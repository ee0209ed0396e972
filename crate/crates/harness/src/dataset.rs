//! Query sets with fixed seeds and their target rankings.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rsd_core::decoder::{run_gsd, run_std};
use rsd_core::oracle::{Oracle, QueryContext, RecordingOracle};
use rsd_core::Ranking;

use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub seed: u64,
    pub split: Split,
    pub target: Ranking,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<QueryContext>,
    pub test: Vec<QueryContext>,
    pub val: Vec<QueryContext>,
}

/// Queries drawn from the master seed: training first, then test, then the
/// final `val_queries` for validation.
pub fn make_splits(cfg: &ExperimentConfig) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_train = cfg.train_queries();
    let mut splits = Splits::default();
    for i in 0..cfg.queries {
        let ctx = QueryContext::new(format!("q{i:06}"), cfg.k, rng.random());
        if i < n_train {
            splits.train.push(ctx);
        } else if i < n_train + cfg.test_queries {
            splits.test.push(ctx);
        } else {
            splits.val.push(ctx);
        }
    }
    splits
}

impl Splits {
    pub fn labelled(&self) -> impl Iterator<Item = (Split, &QueryContext)> {
        self.train
            .iter()
            .map(|q| (Split::Train, q))
            .chain(self.test.iter().map(|q| (Split::Test, q)))
            .chain(self.val.iter().map(|q| (Split::Val, q)))
    }
}

pub fn query_records(oracle: &dyn Oracle, splits: &Splits) -> Result<Vec<QueryRecord>> {
    let labelled: Vec<_> = splits.labelled().collect();
    labelled
        .par_iter()
        .map(|(split, ctx)| {
            Ok(QueryRecord {
                query_id: ctx.query_id.clone(),
                seed: ctx.seed,
                split: *split,
                target: oracle.target_ranking(ctx)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    k: usize,
    seed: u64,
    train: usize,
    test: usize,
    val: usize,
}

/// Writes `queries.jsonl` and `manifest.json` under `dir`, plus `trace.jsonl`
/// when the config asks for it. The trace holds every encoding used for the
/// targets and by the std and gsd methods at every configured budget.
pub fn gen_dataset(cfg: &ExperimentConfig, oracle: &dyn Oracle, dir: &Path) -> Result<Vec<QueryRecord>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let splits = make_splits(cfg);
    let records = if cfg.write_trace {
        let recorder = RecordingOracle::new(oracle, cfg.k);
        let records = query_records(&recorder, &splits)?;
        let all: Vec<_> = splits.labelled().map(|(_, q)| q).collect();
        all.par_iter().try_for_each(|ctx| -> Result<()> {
            run_std(&recorder, ctx)?;
            for &t in &cfg.budgets {
                run_gsd(&recorder, ctx, t)?;
            }
            Ok(())
        })?;
        recorder.write_trace(dir.join("trace.jsonl"))?;
        records
    } else {
        query_records(oracle, &splits)?
    };

    let mut out = BufWriter::new(File::create(dir.join("queries.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let manifest = Manifest {
        k: cfg.k,
        seed: cfg.seed,
        train: splits.train.len(),
        test: splits.test.len(),
        val: splits.val.len(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(records)
}

pub fn read_query_records(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
