use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srcl_cli::commands::{self, CliError, Ctx};
use srcl_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "srcl", version, about = "Similarity-regulated contrastive learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Omit to use defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a value, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the MI bounds on discrete worlds.
    VerifyBounds(Common),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb the analytic gradients (self-test of the audit).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Train a teacher on clean data, then a student on the configured world.
    Train(Common),
    /// Evaluate a checkpoint: retrieval and weight statistics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain with negatives below each threshold removed.
    Sweep(Common),
}

fn context(common: &Common) -> Result<Ctx, CliError> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, &common.overrides)?,
        None => ExperimentConfig::parse("", &common.overrides)?,
    };
    Ctx::new(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::VerifyBounds(c) => commands::verify_bounds(&context(&c)?, &mut stdout).map(drop),
        Command::Gradcheck {
            common,
            corrupt_gradient,
        } => commands::gradcheck(&context(&common)?, corrupt_gradient, &mut stdout).map(drop),
        Command::Train(c) => {
            let ctx = context(&c)?;
            let report = commands::train(&ctx)?;
            report.write_to(&mut stdout)?;
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let ctx = context(&common)?;
            let report = commands::eval(&ctx, &checkpoint)?;
            report.write_to(&mut stdout)?;
            Ok(())
        }
        Command::Sweep(c) => {
            let ctx = context(&c)?;
            let report = commands::sweep(&ctx)?;
            report.write_to(&mut stdout)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("srcl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
