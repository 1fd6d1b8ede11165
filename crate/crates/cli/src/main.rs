mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A command-line problem (bad flag value, missing input).
#[derive(Debug)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(name = "mvpacs", version, about = "Summary-data multivariable Mendelian randomization with signal-group selection")]
struct Cli {
    /// Worker threads for grid and Monte Carlo work (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator and write the estimates as JSON.
    Fit(commands::FitArgs),
    /// Report the instrument-strength diagnostic.
    Diagnose(commands::DiagnoseArgs),
    /// Split a dataset into independent thinned copies.
    Thin(commands::ThinArgs),
    /// Cross-validate the tuning grid and write the loss table.
    Cv(commands::CvArgs),
    /// Thin, select signal-groups on one copy, infer on the other.
    SelectInfer(commands::PipelineArgs),
    /// Repeat select-infer over many thinnings and summarize groupings.
    Stability(commands::StabilityArgs),
    /// Monte Carlo study on the simulated ten-exposure design.
    Simulate(commands::SimulateArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e
        .chain()
        .any(|c| c.downcast_ref::<mvpacs::Error>().is_some_and(|m| !m.is_validation()));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Thin(a) => commands::thin(a),
        Command::Cv(a) => commands::cv(a),
        Command::SelectInfer(a) => commands::select_infer(a),
        Command::Stability(a) => commands::stability(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut last = String::new();
            for cause in e.chain() {
                let msg = cause.to_string();
                // sources are often already spelled out by their wrapper
                if !last.contains(&msg) {
                    eprintln!("error: {msg}");
                }
                last = msg;
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
