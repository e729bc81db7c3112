//! `invbench`: datasets, training, accuracy sweeps, diversity studies and
//! report merging for the inverse-design benchmark.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 missing inputs, 5 I/O failure, 1 anything else.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{FileConfig, OUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "invbench", version, about = "Inverse-design solver benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an LHS dataset labelled by the analytic model.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; defaults to `$INVBENCH_OUT/data/d<n>_s<seed>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model family on a dataset file.
    Train {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Checkpoint directory; defaults to `$INVBENCH_OUT/train/<model>_d<n>_s<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every (model, size, seed) cell on a shared target set.
    AccuracySweep(RunArgs),
    /// Generate many designs for each of the 27 fixed targets.
    Diversity {
        #[command(flatten)]
        run: RunArgs,
        /// Reuse checkpoints of an earlier accuracy sweep instead of training.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Merge the cells of several sweeps into one set of reports.
    Report {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags shared by the study subcommands; each overrides the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// `desk`, `full` or a profile JSON file.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    test_targets: Option<usize>,
    #[arg(long)]
    diversity_samples: Option<usize>,
    #[arg(long)]
    diversity_size: Option<usize>,
    /// Benchmark cells run in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn file_config(self) -> Result<FileConfig, CliError> {
        let base = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Ok(base.overlay(FileConfig {
            seed: self.seed,
            out: self.out,
            profile: self.profile,
            models: self.models,
            sizes: self.sizes,
            seeds: self.seeds,
            sigma: self.sigma,
            test_targets: self.test_targets,
            diversity_samples: self.diversity_samples,
            diversity_size: self.diversity_size,
            jobs: self.jobs,
        }))
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const CONFIG: u8 = 2;
    pub const DIVERGENCE: u8 = 3;
    pub const MISSING: u8 = 4;
    pub const IO: u8 = 5;

    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: Self::CONFIG, message: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        CliError { code: Self::MISSING, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<invbench::Error> for CliError {
    fn from(e: invbench::Error) -> Self {
        use invbench::Error as E;
        let code = match &e {
            E::Config(_) | E::Range(_) | E::Empty(_) => CliError::CONFIG,
            E::Divergence(_) | E::Stalled(_) | E::Numeric(_) => CliError::DIVERGENCE,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => CliError::MISSING,
            E::Io { .. } | E::Format { .. } => CliError::IO,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { n, sigma, seed, out } => commands::gen_data(n, sigma, seed, out),
        Command::Train { model, data, seed, profile, out } => {
            commands::train(&model, &data, seed, &profile, out)
        }
        Command::AccuracySweep(args) => commands::accuracy_sweep(args.file_config()?),
        Command::Diversity { run, from } => commands::diversity(run.file_config()?, from),
        Command::Report { inputs, out } => commands::report(&inputs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
