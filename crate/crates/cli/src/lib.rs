//! Command-line driver for the market-making lab.
//!
//! `essvi-mm train` runs warm-start plus PPO and writes `settings.json`,
//! `run_log.csv` and `step_log.csv`; `essvi-mm diag` runs one diagnostics
//! suite; `essvi-mm plot-data` turns a run directory into plot tables.

pub mod commands;
pub mod output;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{cmd_diag, cmd_plot_data, cmd_train, ConfigArgs, DiagKind};

#[derive(Debug, Parser)]
#[command(name = "essvi-mm", version, about = "eSSVI option market-making lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat JSON settings file; defaults apply to absent keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the settings file.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Override one setting; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    fn config_args(&self) -> ConfigArgs {
        ConfigArgs {
            config: self.config.clone(),
            seed: self.seed,
            overrides: self.set.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Which {
    Sens,
    Grid,
    Wing,
    Cvar,
}

impl From<Which> for DiagKind {
    fn from(w: Which) -> Self {
        match w {
            Which::Sens => DiagKind::Sens,
            Which::Grid => DiagKind::Grid,
            Which::Wing => DiagKind::Wing,
            Which::Cvar => DiagKind::Cvar,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm-start and PPO training run.
    Train(RunArgs),
    /// Sensitivity, grid, wing or CVaR diagnostics.
    Diag {
        #[arg(value_enum)]
        which: Which,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Histogram, surface and training-curve tables from a run directory.
    PlotData {
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let mut log = |m: &str| println!("{m}");
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&a.config_args(), &a.out, &mut log),
        Command::Diag { which, run } => cmd_diag((*which).into(), &run.config_args(), &run.out, &mut log).map(|_| ()),
        Command::PlotData { run, out } => cmd_plot_data(run, out.as_deref().unwrap_or(run)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
