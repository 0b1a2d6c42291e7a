//! Batch front-end for indifference pricing under proportional costs.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

pub use config::ScenarioConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Unreadable or invalid configuration, or unwritable output.
    Config(String),
    /// The cash-gamma admissibility margin is not positive.
    Assumption(String),
    /// A numerical routine failed.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Assumption(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Assumption(m) => write!(f, "assumption check failed: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<indiff_core::Error> for CliError {
    fn from(e: indiff_core::Error) -> Self {
        use indiff_core::Error as E;
        match e {
            E::InvalidParam(_) | E::Domain(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Price,
    Band,
    Simulate,
    Oracle,
    Verify,
    Figure1,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Price => "price",
            Command::Band => "band",
            Command::Simulate => "simulate",
            Command::Oracle => "oracle",
            Command::Verify => "verify",
            Command::Figure1 => "figure1",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: ScenarioConfig,
    pub out: PathBuf,
    /// Overrides `run.seed`.
    pub seed: Option<u64>,
    pub deterministic: bool,
}

/// Files written, console lines and the checks that failed.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            5
        }
    }
}

pub fn run(inv: &Invocation) -> Result<Outcome, CliError> {
    commands::dispatch(inv)
}
