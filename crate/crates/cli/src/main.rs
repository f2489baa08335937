use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrp_core::config::Config;
use lrp_core::error::LabError;
use lrp_core::harness;

#[derive(Parser)]
#[command(name = "lrp", version, about = "Low-rank-gradient pruning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the source task
    Train(Common),
    /// Fine-tune and prune the base model on the downstream task
    Prune(Common),
    /// Run the criterion × sparsity × seed grid
    Compare(Common),
    /// Run the correctness properties
    OracleCheck(Common),
    /// Evaluate a stored checkpoint
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// Config file; built-in defaults when omitted
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the master seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for compare
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<Config, LabError> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.jobs == 0 {
            return Err(LabError::Config("--jobs must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn run(cli: Cli) -> Result<bool, LabError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.config()?;
            let r = harness::cmd_train(&cfg, &c.out)?;
            let s = &r.summary;
            println!(
                "train: {} iterations, final loss {:.4}, val {}, test {}",
                s.iterations,
                s.final_loss,
                pct(s.val_accuracy),
                pct(s.test_accuracy)
            );
            println!("config {}", s.config_hash);
        }
        Command::Prune(c) => {
            let cfg = c.config()?;
            let r = harness::cmd_prune(&cfg, &c.out)?;
            let s = &r.summary;
            println!(
                "prune: {} ({}, {}) sparsity {:.4} of {:.4}, final loss {:.4}, val {}, test {}",
                s.criterion.as_deref().unwrap_or("-"),
                s.tuning.as_deref().unwrap_or("-"),
                s.strategy.as_deref().unwrap_or("-"),
                s.final_sparsity,
                s.target_sparsity,
                s.final_loss,
                pct(s.val_accuracy),
                pct(s.test_accuracy)
            );
            if let Some(rs) = &s.rank_stats {
                println!("agreement with exact Taylor: spearman {:.4}", rs.spearman);
            }
            println!("config {}", s.config_hash);
        }
        Command::Compare(c) => {
            let cfg = c.config()?;
            let r = harness::cmd_compare(&cfg, &c.out, c.jobs)?;
            println!("{:<12} {:<9} {:>8} {:>5} {:>9} {:>8}", "criterion", "strategy", "sparsity", "seeds", "mean", "std");
            for g in &r.groups {
                println!(
                    "{:<12} {:<9} {:>8.2} {:>5} {:>9} {:>7.2}pp",
                    g.criterion,
                    g.strategy,
                    g.sparsity,
                    g.seeds,
                    pct(g.mean_accuracy),
                    100.0 * g.std_accuracy
                );
            }
            println!("config {}", r.config_hash);
        }
        Command::OracleCheck(c) => {
            let cfg = c.config()?;
            let r = harness::cmd_oracle_check(&cfg, &c.out)?;
            for l in r.lines() {
                println!("{l}");
            }
            let failed = r.checks.iter().filter(|c| !c.passed()).count();
            println!("{} checks, {} failed", r.checks.len(), failed);
            return Ok(r.passed);
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            let r = harness::cmd_eval(&cfg, &c.out)?;
            println!(
                "eval {}: sparsity {:.4}, val {}, test {}, test loss {:.4}",
                r.checkpoint,
                r.sparsity,
                pct(r.val_accuracy),
                pct(r.test_accuracy),
                r.test_loss
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ LabError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
