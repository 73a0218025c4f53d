//! `squeeze` command-line front end.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "squeeze", version, about = "Layer-wise KV-cache budget planning and simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer mean cosine profile from a trace file or a toy-model prefill.
    Profile(commands::profile::ProfileArgs),
    /// Cluster a profile and reallocate per-layer budgets.
    Plan(commands::plan::PlanArgs),
    /// Run prefill and greedy decode on the toy model.
    Simulate(commands::simulate::SimulateArgs),
    /// Simulate a list of squeeze ratios or budgets.
    Sweep(commands::sweep::SweepArgs),
    /// Compare simulation reports.
    Report(commands::report::ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Directory receiving the artifacts.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// `b_init` as absolute tokens or as a fraction of the prompt length.
#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    /// Initial per-layer budget in tokens.
    #[arg(long, conflicts_with = "budget")]
    pub b_init: Option<usize>,
    /// Initial per-layer budget as a fraction of the prompt length.
    #[arg(long)]
    pub budget: Option<f64>,
}

impl BudgetArgs {
    pub fn resolve(&self, prompt_len: usize) -> CliResult<Option<usize>> {
        match (self.b_init, self.budget) {
            (Some(0), _) => Err(CliError::Usage("--b-init must be at least 1".into())),
            (Some(b), _) => Ok(Some(b)),
            (None, Some(f)) => squeeze_core::grouping::budget_from_fraction(f, prompt_len)
                .map(Some)
                .map_err(|e| CliError::Usage(e.to_string())),
            (None, None) => Ok(None),
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_from<I, T>(argv: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string()))?;
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    run(cli, &args)
}

pub fn run(cli: Cli, args: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Profile(a) => commands::profile::run(&a, args),
        Command::Plan(a) => commands::plan::run(&a, args),
        Command::Simulate(a) => commands::simulate::run(&a, args),
        Command::Sweep(a) => commands::sweep::run(&a, args),
        Command::Report(a) => commands::report::run(&a, args),
    }
}
