use std::path::PathBuf;
use std::process::ExitCode;

use bifair_cli::commands;
use bifair_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bifair", version, about = "Fairness-aware bi-level recommender training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.inner_lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction world with item metadata and embeddings.
    Synth(Common),
    /// Filter and split interactions, assign item groups, align embeddings.
    Prep(Common),
    /// Train one model and write a checkpoint.
    Train(Common),
    /// Evaluate the checkpoint on the test split.
    Eval(Common),
    /// Train and evaluate every configured method over every configured seed.
    Compare(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, f): (&Common, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Synth(c) => (c, commands::synth),
        Command::Prep(c) => (c, commands::prep),
        Command::Train(c) => (c, commands::train),
        Command::Eval(c) => (c, commands::eval),
        Command::Compare(c) => (c, commands::compare),
    };
    let cfg = RunConfig::load(&common.config, &common.overrides)?;
    f(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BIFAIR_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
