mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trustfg::scenario::{Component, Mode};

#[derive(Debug, Parser)]
#[command(
    name = "trustfg",
    version,
    about = "Trust-aware multi-agent trajectory optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one scenario and write trajectories, metrics, trust report and plot.
    Simulate(Manifest),
    /// Re-run the scenario with each trust component switched off and compare.
    Ablate(Manifest),
}

#[derive(Debug, Clone, Args)]
pub struct Manifest {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Factor kind to switch off; repeatable.
    #[arg(long = "disable", value_name = "KIND")]
    pub disable: Vec<Component>,
    #[arg(long, value_name = "joint|decentralized")]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    // clap exits with 2 on bad flags, which is reserved for non-convergence
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Simulate(m) => run::simulate(m),
        Command::Ablate(m) => run::ablate(m),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: solve did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
