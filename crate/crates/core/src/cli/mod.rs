//! Experiment runner behind the `sliced-sgd` binary.
//!
//! Every subcommand reads one experiment document (`--config`, TOML or
//! JSON; the built-in toy problem when omitted). Flags override document
//! fields: `--out`, `--workers`, `--seed` (replaces the seed list),
//! `--alpha-list` (replaces the alpha list) and `--p`.

pub mod commands;
pub mod config;
pub mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_compare_flow, cmd_criticality, cmd_train};
pub use config::{Experiment, ExperimentConfig, Overrides};
pub use verify::{verify, verify_with, VerifyReport};

#[derive(Debug, Parser)]
#[command(name = "sliced-sgd", version, about = "Minibatch sliced-Wasserstein SGD experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run SGD for every (alpha, seed) pair and write trajectories.
    Train(CommonArgs),
    /// Compare SGD interpolations with the reference gradient flow.
    CompareFlow(CommonArgs),
    /// Run the oracle verification suites.
    Verify(CommonArgs),
    /// Criticality gaps over the tail of projected-noised runs.
    Criticality(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment document (TOML or JSON).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps (0 = one per core).
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Single seed replacing the sweep's seed list.
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Comma-separated step sizes replacing the sweep's alpha list.
    #[arg(long, value_name = "A,B,...", value_delimiter = ',')]
    pub alpha_list: Option<Vec<f64>>,
    /// Transport order p >= 1.
    #[arg(long)]
    pub p: Option<f64>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out_dir: self.out.clone(),
            workers: self.workers,
            seed: self.seed,
            alphas: self.alpha_list.clone(),
            p: self.p,
        }
    }

    /// Loads the document (or the toy default), applies overrides and loads
    /// the network and measures.
    pub fn experiment(&self) -> crate::Result<Experiment> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => {
                let mut c = crate::toy::experiment_config();
                c.resolve_paths(&std::env::current_dir().unwrap_or_default());
                c
            }
        };
        config.apply(&self.overrides())?;
        config.load()
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialises")
}

/// Executes a parsed command line. Returns `Ok(false)` when a requested
/// check fails.
pub fn execute(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Train(args) => {
            let exp = args.experiment()?;
            let report = cmd_train(&exp)?;
            for run in &report.runs {
                println!("alpha = {}, seed = {}: {}", run.alpha, run.seed, run.csv.display());
            }
            Ok(true)
        }
        Command::CompareFlow(args) => {
            let exp = args.experiment()?;
            let report = cmd_compare_flow(&exp)?;
            for m in &report.medians {
                println!("alpha = {}: median d_c = {:.6e} over {} runs", m.alpha, m.median, m.runs);
            }
            println!("trend (non-increasing as alpha decreases): {}", report.trend_ok);
            Ok(true)
        }
        Command::Criticality(args) => {
            let exp = args.experiment()?;
            let report = cmd_criticality(&exp)?;
            for m in &report.medians {
                println!("alpha = {}: median tail gap = {:.6e} over {} runs", m.alpha, m.median, m.runs);
            }
            println!(
                "smallest-alpha median gap / initial gradient norm = {:.4}",
                report.smallest_alpha_ratio
            );
            println!("trend (non-increasing as alpha decreases): {}", report.trend_ok);
            Ok(true)
        }
        Command::Verify(args) => {
            let exp = args.experiment()?;
            let report = verify(&exp)?;
            let dir = exp.config.out_dir.join("verify");
            std::fs::create_dir_all(&dir)?;
            let json = serde_json::json!({
                "experiment": serde_json::from_str::<serde_json::Value>(&exp.config.echo())?,
                "report": report,
            });
            std::fs::write(dir.join("report.json"), to_json(&json) + "\n")?;
            println!("{}", to_json(&report));
            for suite in report.suites.iter().filter(|s| !s.passed) {
                eprintln!(
                    "suite {} failed: {} (max error {:e}, tolerance {:e})",
                    suite.name,
                    suite.violation.as_deref().unwrap_or(""),
                    suite.max_error,
                    suite.tolerance
                );
            }
            Ok(report.passed)
        }
    }
}

/// Entry point of the binary: exit 0 on success, 1 when a check fails, 2 on
/// configuration, I/O or divergence errors.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
