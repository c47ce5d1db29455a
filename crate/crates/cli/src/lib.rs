//! Command-line driver: generate and analyze streams, tune hashers, train,
//! benchmark and sweep. Every verb reads one TOML run configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::Loaded;
use crate::error::CliResult;
use crate::output::OutDir;

#[derive(Debug, Parser)]
#[command(
    name = "simreuse",
    version,
    about = "Similarity-aware computation reuse toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Frame similarity matrix and per-layer similarity profile.
    Analyze(Common),
    /// Per-layer hasher tuning.
    Tune(Common),
    /// Pretraining and/or similarity-aware training.
    Train(Common),
    /// Exact vs reuse evaluation of checkpoints.
    Bench(Common),
    /// `train` once per regularizer setting.
    Sweep(Common),
    /// Write the configured synthetic stream to a file.
    Gen(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Analyze(c) => ("analyze", c),
            Command::Tune(c) => ("tune", c),
            Command::Train(c) => ("train", c),
            Command::Bench(c) => ("bench", c),
            Command::Sweep(c) => ("sweep", c),
            Command::Gen(c) => ("gen", c),
        }
    }
}

pub fn run(command: &Command) -> CliResult<()> {
    let started = Instant::now();
    let (name, common) = command.parts();
    let ld = Loaded::from_file(&common.config, common.seed)?;
    let out = OutDir::create(&common.out)?;
    match command {
        Command::Analyze(_) => commands::cmd_analyze(&ld, &out)?,
        Command::Tune(_) => commands::cmd_tune(&ld, &out)?,
        Command::Train(_) => {
            commands::cmd_train(&ld, &out)?;
        }
        Command::Bench(_) => {
            commands::cmd_bench(&ld, &out)?;
        }
        Command::Sweep(_) => {
            commands::cmd_sweep(&ld, &out)?;
        }
        Command::Gen(_) => commands::cmd_gen(&ld, &out)?,
    }
    out.write_timing(name, started.elapsed())
}
