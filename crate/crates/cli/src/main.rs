use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rehearse::experiment::{
    compare, corrupt_eval_checkpoint, eval_checkpoint, load_config, run_experiment,
};
use rehearse::Error;

#[derive(Parser)]
#[command(
    name = "rehearse",
    version,
    about = "Seeded continual-learning experiments: replay with logit-consistency regularization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config and write reports.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the clean test stream of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint under the full corruption battery.
    CorruptEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Relative gains of run directory A over run directory B.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
}

// Invalid configuration is 2, a numerically diverged run is 3, anything
// else (I/O, malformed data) is the generic 1.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> rehearse::Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = Some(out);
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let aggregate = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&aggregate)?);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let metrics = eval_checkpoint(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::CorruptEval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let report = corrupt_eval_checkpoint(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare { dir_a, dir_b } => {
            let report = compare(&dir_a, &dir_b)?;
            print!(
                "{}",
                report.render_table(&dir_a.display().to_string(), &dir_b.display().to_string())
            );
            println!("{}", serde_json::to_string_pretty(&report.gains)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
