use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omsi_cli::commands::{cmd_run, cmd_sweep, cmd_verify, SweepAxis};

#[derive(Parser)]
#[command(
    name = "omsi",
    about = "Online continual learning with meta-learned sample importance",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the experiment once per value of one hyperparameter axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// alpha | k_inner | fraction
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. 0,50,100,150,200
        #[arg(long)]
        values: String,
    },
    /// Check every gradient path against finite differences.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt one analytic gradient; the suites must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config } => cmd_run(&config).map(|_| true),
        Command::Sweep {
            config,
            axis,
            values,
        } => SweepAxis::parse(&axis).and_then(|axis| {
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            cmd_sweep(&config, axis, &values).map(|_| true)
        }),
        Command::Verify {
            instances,
            seed,
            inject_fault,
        } => cmd_verify(instances, seed, inject_fault),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
