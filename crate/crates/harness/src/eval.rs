//! Paired evaluation of decoding methods over a fixed query set.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rsd_core::decoder::{run_episode, run_gsd, run_std, PolicyDrafter};
use rsd_core::oracle::{Oracle, QueryContext};
use rsd_core::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use rsd_core::trainer::{train, TrainConfig, TrainLogEntry};
use rsd_core::MetricReport;

use crate::config::{ExperimentConfig, Method};
use crate::dataset::make_splits;

/// Result of one method on one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub metrics: MetricReport,
    pub encodings: usize,
    /// Leading positions shared with the target.
    pub prefix_agreement: usize,
    pub i_stars: Vec<isize>,
}

/// Decodes every query with `method`. Learned methods need `policy`.
pub fn run_method(
    oracle: &dyn Oracle,
    method: Method,
    policy: Option<&PolicyParams>,
    queries: &[QueryContext],
    budget: usize,
) -> Result<Vec<QueryOutcome>> {
    if method.is_learned() && policy.is_none() {
        bail!("{method} needs a trained policy");
    }
    queries
        .par_iter()
        .map(|ctx| {
            let target = oracle.target_ranking(ctx)?;
            let (ranking, encodings, i_stars) = match method {
                Method::Std => {
                    let (r, ledger) = run_std(oracle, ctx)?;
                    (r, ledger.used, Vec::new())
                }
                Method::Gsd => {
                    let t = run_gsd(oracle, ctx, budget)?;
                    let used = t.encodings_used();
                    (t.final_ranking, used, t.i_stars)
                }
                Method::Rsd | Method::RsdMlp => {
                    let drafter = PolicyDrafter::greedy(policy.expect("checked above"));
                    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
                    let t = run_episode(oracle, ctx, &drafter, budget, &mut rng)?;
                    let used = t.encodings_used();
                    (t.final_ranking, used, t.i_stars)
                }
            };
            if encodings > budget {
                bail!("{method} used {encodings} encodings on {} with budget {budget}", ctx.query_id);
            }
            Ok(QueryOutcome {
                query_id: ctx.query_id.clone(),
                metrics: MetricReport::compare(&ranking, &target)?,
                encodings,
                prefix_agreement: ranking.prefix_agreement(&target),
                i_stars,
            })
        })
        .collect()
}

/// Trains a fresh policy for `method` on `queries`, reporting each log entry.
pub fn train_policy(
    oracle: &dyn Oracle,
    cfg: &ExperimentConfig,
    method: Method,
    train_cfg: &TrainConfig,
    queries: &[QueryContext],
    log: impl FnMut(&TrainLogEntry),
) -> Result<PolicyParams> {
    let pc = cfg.policy_config(method)?;
    let mut params = PolicyParams::init(pc, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
    train(&mut params, oracle, queries, train_cfg, log)?;
    Ok(params)
}

pub fn checkpoint_path(out: &Path, method: Method, run: usize) -> PathBuf {
    out.join("checkpoints").join(format!("{method}-run{run}.ckpt"))
}

/// Appends `{"method", "run", ...entry}` lines to `train_log.jsonl`.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn append(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("train_log.jsonl"))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, method: Method, run: usize, entry: &TrainLogEntry) -> Result<()> {
        let mut line = serde_json::json!({ "method": method, "run": run });
        if let (Some(obj), serde_json::Value::Object(fields)) = (line.as_object_mut(), serde_json::to_value(entry)?) {
            obj.extend(fields);
        }
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

/// Loads the checkpoint for `(method, run)` from `out` when it fits the
/// config, otherwise trains one, saves it and logs the run.
pub fn obtain_policy(
    oracle: &dyn Oracle,
    cfg: &ExperimentConfig,
    method: Method,
    run: usize,
    train_queries: &[QueryContext],
    out: &Path,
) -> Result<PolicyParams> {
    let path = checkpoint_path(out, method, run);
    let expected = cfg.policy_config(method)?;
    if path.exists() {
        let params = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        if *params.config() == expected {
            return Ok(params);
        }
    }
    let mut log = TrainLog::append(out)?;
    let mut failure = None;
    let params = train_policy(oracle, cfg, method, &cfg.train_config(run), train_queries, |e| {
        if failure.is_none() {
            failure = log.write(method, run, e).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush()?;
    fs::create_dir_all(path.parent().expect("checkpoint has a parent"))?;
    save_checkpoint(&params, &path)?;
    Ok(params)
}

/// One table row: aggregates over runs of per-run query means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub budget: usize,
    pub runs: usize,
    pub queries: usize,
    pub kt_mean: f64,
    pub kt_std: f64,
    pub sr_mean: f64,
    pub sr_std: f64,
    pub fd_mean: f64,
    pub fd_std: f64,
    pub kd_mean: f64,
    pub kd_std: f64,
    pub encodings_mean: f64,
    pub prefix_mean: f64,
    /// Mean `i_star` at each verification, over episodes that reached it.
    pub i_star_mean: Vec<f64>,
}

const CSV_HEADER: [&str; 15] = [
    "method",
    "budget",
    "runs",
    "queries",
    "kt_mean",
    "kt_std",
    "sr_mean",
    "sr_std",
    "fd_mean",
    "fd_std",
    "kd_mean",
    "kd_std",
    "encodings_mean",
    "prefix_mean",
    "i_star_mean",
];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl EvalRow {
    /// `runs[r]` holds the outcomes of run `r`, all over the same queries.
    pub fn aggregate(method: Method, budget: usize, runs: &[Vec<QueryOutcome>]) -> Self {
        let per_run = |f: &dyn Fn(&QueryOutcome) -> f64| -> Vec<f64> {
            runs.iter()
                .map(|r| mean(&r.iter().map(f).collect::<Vec<_>>()))
                .collect()
        };
        let kt = per_run(&|o| o.metrics.kt);
        let sr = per_run(&|o| o.metrics.sr);
        let fd = per_run(&|o| o.metrics.fd as f64);
        let kd = per_run(&|o| o.metrics.kd as f64);
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for o in runs.iter().flatten() {
            for (t, &i) in o.i_stars.iter().enumerate() {
                if sums.len() <= t {
                    sums.push((0.0, 0));
                }
                sums[t].0 += i as f64;
                sums[t].1 += 1;
            }
        }
        Self {
            method,
            budget,
            runs: runs.len(),
            queries: runs.first().map_or(0, Vec::len),
            kt_mean: mean(&kt),
            kt_std: std_dev(&kt),
            sr_mean: mean(&sr),
            sr_std: std_dev(&sr),
            fd_mean: mean(&fd),
            fd_std: std_dev(&fd),
            kd_mean: mean(&kd),
            kd_std: std_dev(&kd),
            encodings_mean: mean(&per_run(&|o| o.encodings as f64)),
            prefix_mean: mean(&per_run(&|o| o.prefix_agreement as f64)),
            i_star_mean: sums.iter().map(|&(s, n)| s / n as f64).collect(),
        }
    }

    fn csv_record(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.6}");
        vec![
            self.method.to_string(),
            self.budget.to_string(),
            self.runs.to_string(),
            self.queries.to_string(),
            f(self.kt_mean),
            f(self.kt_std),
            f(self.sr_mean),
            f(self.sr_std),
            f(self.fd_mean),
            f(self.fd_std),
            f(self.kd_mean),
            f(self.kd_std),
            f(self.encodings_mean),
            f(self.prefix_mean),
            self.i_star_mean.iter().map(|&x| f(x)).collect::<Vec<_>>().join(";"),
        ]
    }
}

pub fn write_rows_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Invariants every finished evaluation must satisfy.
fn check_outcomes(method: Method, k: usize, budget: usize, outcomes: &[QueryOutcome]) -> Result<()> {
    if method == Method::Gsd {
        for o in outcomes {
            if o.prefix_agreement < budget.min(k) {
                bail!(
                    "gsd agrees with the target on {} leading items of {} at budget {budget}",
                    o.prefix_agreement,
                    o.query_id
                );
            }
        }
    }
    Ok(())
}

/// Outcomes per method and run on the test split at `budget`.
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    pub outcomes: Vec<(Method, Vec<Vec<QueryOutcome>>)>,
}

pub fn run_eval(oracle: &dyn Oracle, cfg: &ExperimentConfig, out: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let splits = make_splits(cfg);
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for &method in &cfg.methods {
        let mut runs = Vec::with_capacity(cfg.runs);
        for run in 0..cfg.runs {
            let policy = if method.is_learned() {
                Some(obtain_policy(oracle, cfg, method, run, &splits.train, out)?)
            } else {
                None
            };
            let o = run_method(oracle, method, policy.as_ref(), &splits.test, cfg.budget)?;
            check_outcomes(method, cfg.k, cfg.budget, &o)?;
            runs.push(o);
        }
        rows.push(EvalRow::aggregate(method, cfg.budget, &runs));
        outcomes.push((method, runs));
    }
    fs::create_dir_all(out)?;
    write_rows_csv(&rows, &out.join("results.csv"))?;
    fs::write(out.join("results.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(Evaluation { rows, outcomes })
}

/// Mean KT and prefix agreement per method and budget, written to `curves.csv`.
pub fn budget_sweep(oracle: &dyn Oracle, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let splits = make_splits(cfg);
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let policies: Vec<Option<PolicyParams>> = (0..cfg.runs)
            .map(|run| {
                if method.is_learned() {
                    obtain_policy(oracle, cfg, method, run, &splits.train, out).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        for &t in &cfg.budgets {
            let runs = policies
                .iter()
                .map(|p| {
                    let o = run_method(oracle, method, p.as_ref(), &splits.test, t)?;
                    check_outcomes(method, cfg.k, t, &o)?;
                    Ok(o)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(EvalRow::aggregate(method, t, &runs));
        }
    }
    fs::create_dir_all(out)?;
    let path = out.join("curves.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["method", "budget", "kt_mean", "kt_std", "prefix_mean", "encodings_mean"])?;
    for r in &rows {
        w.write_record([
            r.method.to_string(),
            r.budget.to_string(),
            format!("{:.6}", r.kt_mean),
            format!("{:.6}", r.kt_std),
            format!("{:.6}", r.prefix_mean),
            format!("{:.6}", r.encodings_mean),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(kt: f64, i_stars: Vec<isize>) -> QueryOutcome {
        QueryOutcome {
            query_id: "q".into(),
            metrics: MetricReport { kt, sr: kt, fd: 2, kd: 1 },
            encodings: 3,
            prefix_agreement: 1,
            i_stars,
        }
    }

    #[test]
    fn aggregates_are_over_run_means() {
        let runs = vec![
            vec![outcome(1.0, vec![-1, 2]), outcome(0.0, vec![0])],
            vec![outcome(0.0, vec![1]), outcome(0.0, vec![])],
        ];
        let row = EvalRow::aggregate(Method::Gsd, 3, &runs);
        assert_eq!(row.kt_mean, 0.25);
        assert!((row.kt_std - 0.5f64.sqrt() * 0.5).abs() < 1e-12);
        assert_eq!(row.i_star_mean, vec![0.0, 2.0]);
        assert_eq!(row.queries, 2);
        assert_eq!(row.fd_std, 0.0);
    }

    #[test]
    fn csv_has_a_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = EvalRow::aggregate(Method::Std, 1, &[vec![outcome(0.5, vec![])]]);
        write_rows_csv(&[row], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("std,1,1,1,0.500000,0.000000"));
    }
}
