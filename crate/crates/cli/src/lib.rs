pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use progemb_core::loss::LossMode;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "progemb", version, about = "Train and evaluate a toy dense retriever with a progressive contrastive loss")]
pub struct Cli {
    /// Run configuration file (flat `key = value`).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `loss_mode` from the config file.
    #[arg(long, global = true, value_name = "progressive|infonce")]
    pub loss_mode: Option<LossMode>,
    /// Overrides `out` from the config file.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Masked-autoencoding pretraining on `corpus`; writes a checkpoint and loss curve.
    Pretrain,
    /// Split `corpus` into passages, generate queries and mine hard negatives.
    Mine,
    /// Contrastive fine-tuning of `checkpoint` on `dataset`.
    Finetune,
    /// Embed `gallery` and `queries` and score the ranking against `qrels`.
    Evaluate,
    /// Progressive vs InfoNCE on synthetic clustered data.
    Bench,
}

/// Loads the config named on the command line and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::validation("--config PATH is required"))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = cli.loss_mode {
        config.loss_mode = mode;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&config).map(drop),
        Command::Mine => commands::cmd_mine(&config).map(drop),
        Command::Finetune => commands::cmd_finetune(&config).map(drop),
        Command::Evaluate => commands::cmd_evaluate(&config).map(drop),
        Command::Bench => commands::cmd_bench(&config).map(drop),
    }
}
