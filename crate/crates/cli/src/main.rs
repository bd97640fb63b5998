//! `ppdst`: pretrain a frozen backbone, run continual-learning experiments,
//! recompute their metrics, and export context vectors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit status for invalid configs, paths and arguments.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for failures after validation succeeded.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "ppdst", version, about = "Prompt-pool continual learning for dialog state tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone described by the config.
    Pretrain {
        config: PathBuf,
        /// Replace an existing checkpoint.
        #[arg(long)]
        overwrite: bool,
        /// Override a scalar config field, e.g. `--set backbone.recipe.init_seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train and evaluate the configured method once per seed.
    Run {
        config: PathBuf,
        /// Replace an existing run directory.
        #[arg(long)]
        overwrite: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute metrics of a run directory from its pool checkpoints.
    Eval { run_dir: PathBuf },
    /// Write one CSV row per test turn: task, turn key and context vector.
    ExportContexts {
        config: PathBuf,
        /// Seed that generates the tasks (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (defaults to `<output_dir>/contexts_seed_<seed>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            overwrite,
            overrides,
        } => commands::pretrain(&config, &overrides, overwrite),
        Command::Run {
            config,
            overwrite,
            overrides,
        } => commands::run(&config, &overrides, overwrite),
        Command::Eval { run_dir } => commands::eval(&run_dir),
        Command::ExportContexts {
            config,
            seed,
            out,
            overrides,
        } => commands::export_contexts(&config, &overrides, seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
