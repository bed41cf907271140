use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use subgrid_core::experiment::{
    cmd_assimilate, cmd_evaluate, cmd_generate, cmd_train, parse_methods, ExperimentConfig, Method,
};

/// Model error estimation and stochastic parameterization experiments on
/// the multi-scale Lorenz 96 system.
#[derive(Parser)]
#[command(name = "subgrid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the truth run and synthesize observations.
    Generate(Common),
    /// Estimate model errors and fit their densities.
    Train(Common),
    /// Run ensemble assimilation campaigns with free forecasts.
    Assimilate(Common),
    /// Score forecasts and compare climatologies.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory shared by all stages.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods, e.g. proposed,b1,b2.
    #[arg(long)]
    methods: Option<String>,
    /// Replace a seed, e.g. truth=7. May be repeated.
    #[arg(long = "seed-override", value_name = "KEY=VALUE")]
    seed_overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        for o in &self.seed_overrides {
            cfg.apply_seed_override(o)?;
        }
        Ok(cfg)
    }

    fn methods(&self) -> Result<Option<Vec<Method>>> {
        Ok(match &self.methods {
            Some(list) => Some(parse_methods(list)?),
            None => None,
        })
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(c) => {
            if c.methods.is_some() {
                bail!("generate does not take --methods");
            }
            let s = cmd_generate(&c.config()?, &c.out)?;
            println!(
                "generated {} training, {} assimilation and {} climatology records in {}",
                s.training_records,
                s.assimilation_records,
                s.climatology_records,
                c.out.display()
            );
            Ok(true)
        }
        Command::Train(c) => {
            let s = cmd_train(&c.config()?, &c.out, c.methods()?.as_deref())?;
            for t in &s.methods {
                match (t.ok, t.kld) {
                    (true, Some(k)) => println!("{}: {} records, KLD {k:.4}", t.method, t.records),
                    (true, None) => println!("{}: {} records", t.method, t.records),
                    (false, _) => println!("{}: FAILED", t.method),
                }
                if let Some(msg) = &t.message {
                    println!("  {msg}");
                }
            }
            Ok(s.methods.iter().all(|t| t.ok))
        }
        Command::Assimilate(c) => {
            let s = cmd_assimilate(&c.config()?, &c.out, c.methods()?.as_deref())?;
            for m in &s.methods {
                println!(
                    "{}: {} runs completed, {} failed, mean analysis RMSE {:.4}",
                    m.method,
                    m.completed_runs,
                    m.failed_runs.len(),
                    m.mean_analysis_rmse
                );
                if let Some(msg) = &m.message {
                    println!("  {msg}");
                }
            }
            Ok(s.methods.iter().all(|m| m.ok))
        }
        Command::Evaluate(c) => {
            let s = cmd_evaluate(&c.config()?, &c.out, c.methods()?.as_deref())?;
            for l in &s.lead_scores {
                println!(
                    "{:>8} lead {:.2}: CRPS {:.4}  log score {:.3}  RMSE {:.4}",
                    l.method.name(),
                    l.lead_mtu,
                    l.crps,
                    l.log_score,
                    l.rmse
                );
            }
            for (model, d) in &s.climatology_ks {
                println!("climatology KS distance {model}: {d:.4}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
