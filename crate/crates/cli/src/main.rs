use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fairfed::config::parse_config;
use fairfed::data::{generate_synthetic, write_csv, SynthConfig};
use fairfed::experiment::{emit_report, run_experiment, RunOptions};

/// Environment variable holding the log filter, e.g. `info` or `fairfed=debug`.
const LOG_ENV: &str = "FAIRFED_LOG";

#[derive(Parser)]
#[command(name = "fairfed", version, about = "Federated fair classification with local differential privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing run in the output directory.
        #[arg(long)]
        overwrite: bool,
        /// Run with privacy on and off under the same seed and compare.
        #[arg(long)]
        paired_privacy: bool,
    },
    /// Combine run directories into plot data and comparison tables.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic two-group dataset as CSV.
    GenSynth {
        #[arg(long)]
        rows: usize,
        /// 0 removes all group dependence.
        #[arg(long, default_value_t = 1.0)]
        bias: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            overwrite,
            paired_privacy,
        } => {
            let mut cfg = parse_config(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            let Some(out) = out.or_else(|| cfg.output.dir.clone()) else {
                bail!("no output directory: pass --out or set output.dir");
            };
            cfg.output.dir = Some(out.clone());
            let opts = RunOptions {
                overwrite,
                paired_privacy,
            };
            let result = run_experiment(&cfg, &out, opts)?;
            for dir in &result.run_dirs {
                println!("{}", dir.display());
            }
        }
        Command::Report { runs, out } => {
            let summary = emit_report(&runs, &out)?;
            if summary.truncated {
                println!("runs differ in length; kept the first {} rounds", summary.rounds);
            }
            println!("{}", out.display());
        }
        Command::GenSynth { rows, bias, seed, out } => {
            let raw = generate_synthetic(&SynthConfig::new(rows, bias, seed))?;
            write_csv(&raw, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
