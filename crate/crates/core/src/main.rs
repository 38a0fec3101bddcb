use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nmpc_tuner::harness::{Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "nmpc-tuner", version, about = "NMPC weight tuning experiments on a simulated 6-DOF arm")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/experiment.json")]
    config: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate and smooth the reference path.
    Plan,
    /// Run fixed-weight repetitions.
    Track,
    /// Iteratively tune the weights over repetitions.
    Tune,
    /// Run the Bayesian-optimization baseline.
    Bo,
    /// Build the comparison table from persisted logs.
    Compare,
    /// Export plot-ready traces from persisted logs.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Plan => Command::Plan,
            Cmd::Track => Command::Track,
            Cmd::Tune => Command::Tune,
            Cmd::Bo => Command::Bo,
            Cmd::Compare => Command::Compare,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = ExperimentConfig::from_path(&cli.config).and_then(|cfg| Command::from(cli.command).run(&cfg, cli.force));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
