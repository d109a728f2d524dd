use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qrev::report::{run, Command as RunCommand, Overrides, EXIT_INPUT_ERROR};
use qrev::spec::parse_spec;

/// Queueing-model toolkit: build Markovian queueing models, solve their
/// stationary distributions, reverse them in time, check balance and
/// quasi-reversibility, verify product forms, and simulate departures.
#[derive(Parser)]
#[command(name = "qrev", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON model-spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Directory for CSV sidecars (pi.csv, trajectory.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tolerance override for checks.
    #[arg(long)]
    tol: Option<f64>,
    /// Seed override (falls back to the spec, then QREV_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the stationary distribution and report the pi table.
    Solve(Common),
    /// Build the time reversal and certify it via Kelly's lemma.
    Reverse(Common),
    /// Run the balance/reversibility checks listed in the spec.
    Check(Common),
    /// Solve the traffic equations and verify the product form.
    Network(Common),
    /// Simulate the departure process and test it for the Poisson property.
    Simulate(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Command::Solve(c) => (RunCommand::Solve, c),
        Command::Reverse(c) => (RunCommand::Reverse, c),
        Command::Check(c) => (RunCommand::Check, c),
        Command::Network(c) => (RunCommand::Network, c),
        Command::Simulate(c) => (RunCommand::Simulate, c),
    };
    let text = match std::fs::read_to_string(&common.spec) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", common.spec.display());
            return ExitCode::from(EXIT_INPUT_ERROR as u8);
        }
    };
    let spec = match parse_spec(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT_ERROR as u8);
        }
    };
    let overrides = Overrides { tol: common.tol, seed: common.seed, out_dir: common.out };
    let (report, code) = run(&spec, &text, command, &overrides);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    ExitCode::from(code as u8)
}
