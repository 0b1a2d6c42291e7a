use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use indiff_cli::{run, CliError, Command, Invocation, ScenarioConfig};

#[derive(Parser)]
#[command(name = "indiff", version, about = "Indifference prices, no-trade bands and checks under proportional costs")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Scenario file (flat dotted-key TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV files
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed overriding run.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit the timestamp from CSV comment lines
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Indifference price with V0 and the correction term
    Price,
    /// No-trade band over an (S, t) grid
    Band,
    /// Monte Carlo of the band strategy
    Simulate,
    /// Finite-difference QVI solve, sandwich check and price
    Oracle,
    /// Sign, gradient, final-time and pasting checks
    Verify,
    /// Normalised correction against the mollification parameter
    Figure1,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Price => Command::Price,
            Cmd::Band => Command::Band,
            Cmd::Simulate => Command::Simulate,
            Cmd::Oracle => Command::Oracle,
            Cmd::Verify => Command::Verify,
            Cmd::Figure1 => Command::Figure1,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = (|| -> Result<i32, CliError> {
        let config = match &args.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        let inv = Invocation {
            command: args.command.into(),
            config,
            out: args.out.clone(),
            seed: args.seed,
            deterministic: args.deterministic,
        };
        let outcome = run(&inv)?;
        for line in &outcome.lines {
            println!("{line}");
        }
        for f in &outcome.files {
            println!("wrote {}", f.display());
        }
        for fail in &outcome.failures {
            eprintln!("check failed: {fail}");
        }
        Ok(outcome.exit_code())
    })();
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("indiff: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
