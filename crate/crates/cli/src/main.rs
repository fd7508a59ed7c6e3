use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mfd_cli::commands::{cmd_eval, cmd_stats, cmd_synth, cmd_train, cmd_verify, fault_from_env};
use mfd_cli::RunConfig;
use mfd_core::verify::BatteryConfig;

/// Food logo detection: data generation, training, evaluation and
/// self-checks.
#[derive(Parser)]
#[command(name = "mfd", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration, overlaid on the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set optim.lr=0.01`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic logo corpus (PNG + VOC XML + manifest.json).
    Synth,
    /// Train a detector; writes model.mfdn, optimizer.mfdn and train_log.jsonl.
    Train,
    /// Evaluate a checkpoint or a detection dump; prints the report JSON.
    Eval,
    /// Dataset statistics; prints the stats JSON.
    Stats,
    /// Run the gradient checks and oracle suites.
    Verify {
        /// Random cases per check.
        #[arg(long, default_value_t = BatteryConfig::default().seeds)]
        seeds: u64,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MFD_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("MFD_THREADS={:?} is not a count", v))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    let g = &cli.global;
    let cfg = || RunConfig::resolve(g.config.as_deref(), &g.sets, g.seed, g.out.as_deref());
    match cli.command {
        Command::Synth => cmd_synth(&cfg()?)?,
        Command::Train => {
            cmd_train(&cfg()?)?;
        }
        Command::Eval => println!("{}", serde_json::to_string_pretty(&cmd_eval(&cfg()?)?)?),
        Command::Stats => println!("{}", serde_json::to_string_pretty(&cmd_stats(&cfg()?)?)?),
        Command::Verify { seeds } => {
            let report = cmd_verify(&BatteryConfig {
                seeds,
                fault: fault_from_env()?,
                ..BatteryConfig::default()
            });
            print!("{}", report.table());
            let failed = report.failures();
            if !failed.is_empty() {
                eprintln!("verify failed: {}", failed.join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
