use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rsd_harness::config::{parse_list, ExperimentConfig, Method};
use rsd_harness::dataset::{gen_dataset, make_splits};
use rsd_harness::eval::{budget_sweep, checkpoint_path, obtain_policy, run_eval};
use rsd_harness::report::{cost_table, format_cost, format_variance, variance_table, write_variance_csv};

#[derive(Parser)]
#[command(name = "rsd", version, about = "Budgeted speculative ranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise query splits, targets and optionally an encoding trace.
    GenData(Common),
    /// Train the learned drafters and save checkpoints.
    Train(Common),
    /// Evaluate every method on the test split.
    Eval(Common),
    /// Evaluate every method at each budget.
    Sweep(Common),
    /// Monte-Carlo variance of the reference and group advantages.
    VarianceCheck(Common),
    /// Closed-form decoding costs.
    CostModel(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of std,gsd,rsd,rsd-mlp.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated budgets for the sweep.
    #[arg(long)]
    budgets: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = parse_list::<Method>(m)?;
        }
        if let Some(b) = &self.budgets {
            cfg.budgets = parse_list::<usize>(b)?;
        }
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        fs::write(cfg.out_dir.join("config.toml"), toml::to_string(&cfg)?)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let oracle = cfg.oracle.build(cfg.k)?;
            let dir = cfg.out_dir.join("dataset");
            let records = gen_dataset(&cfg, oracle.as_ref(), &dir)?;
            println!("wrote {} queries to {}", records.len(), dir.display());
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let oracle = cfg.oracle.build(cfg.k)?;
            let splits = make_splits(&cfg);
            for &method in cfg.methods.iter().filter(|m| m.is_learned()) {
                for run in 0..cfg.runs {
                    obtain_policy(oracle.as_ref(), &cfg, method, run, &splits.train, &cfg.out_dir)?;
                    println!("{}", checkpoint_path(&cfg.out_dir, method, run).display());
                }
            }
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let oracle = cfg.oracle.build(cfg.k)?;
            let eval = run_eval(oracle.as_ref(), &cfg, &cfg.out_dir)?;
            println!("{:<8} {:>9} {:>9} {:>9} {:>9} {:>10}", "method", "KT", "SR", "FD", "KD", "encodings");
            for r in &eval.rows {
                println!(
                    "{:<8} {:>9.4} {:>9.4} {:>9.2} {:>9.2} {:>10.2}",
                    r.method.to_string(),
                    r.kt_mean,
                    r.sr_mean,
                    r.fd_mean,
                    r.kd_mean,
                    r.encodings_mean
                );
            }
        }
        Command::Sweep(c) => {
            let cfg = c.resolve()?;
            let oracle = cfg.oracle.build(cfg.k)?;
            let rows = budget_sweep(oracle.as_ref(), &cfg, &cfg.out_dir)?;
            for r in &rows {
                println!("{:<8} T={:<3} KT {:.4} prefix {:.2}", r.method.to_string(), r.budget, r.kt_mean, r.prefix_mean);
            }
        }
        Command::VarianceCheck(c) => {
            let cfg = c.resolve()?;
            let rows = variance_table(cfg.train.group_size, cfg.variance_samples, cfg.seed)?;
            print!("{}", format_variance(&rows));
            write_variance_csv(&rows, &cfg.out_dir.join("variance.csv"))?;
        }
        Command::CostModel(c) => {
            let cfg = c.resolve()?;
            let rows = cost_table(cfg.prompt_tokens, cfg.k as u64, cfg.budget as u64, cfg.model_dim);
            print!("{}", format_cost(&rows));
            fs::write(cfg.out_dir.join("cost.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
