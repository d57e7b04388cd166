//! Experiment runner behind the `sensemask` binary.

pub mod artifacts;
pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::Result;
use config::{parse_override, RawConfig};

#[derive(Debug, Parser)]
#[command(name = "sensemask", version, about = "Learn structured binary measurement masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (`key = value` per line).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a mask and solver parameters.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in this run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a saved mask on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Mask file (`mask.gldm`); overrides the config's `mask`.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Greedy or simulated-annealing search over the same mask space.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Repeat a command over the values of `sweep_field`.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, extra: &[(String, String)]) -> Result<RawConfig> {
    let mut overrides = common.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(extra.iter().cloned());
    RawConfig::from_file(&common.config, &overrides)
}

/// Runs one parsed command line and returns the output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let (name, common) = match &cli.command {
        Command::Train { common, .. } => ("train", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Baseline { common } => ("baseline", common),
        Command::Sweep { common } => ("sweep", common),
    };
    let extra = match &cli.command {
        Command::Eval { mask: Some(m), .. } => vec![("mask".to_string(), m.display().to_string())],
        _ => Vec::new(),
    };
    let raw = resolve(common, &extra)?;
    let out = common.out.clone().unwrap_or_else(|| run::default_out(name, &raw));
    match &cli.command {
        Command::Train { resume, .. } => run::run_train(&raw, &out, resume.as_deref()).map(drop),
        Command::Eval { .. } => run::run_eval(&raw, &out).map(drop),
        Command::Baseline { .. } => run::run_baseline(&raw, &out).map(drop),
        Command::Sweep { .. } => run::run_sweep(&raw, &out).map(drop),
    }?;
    Ok(out)
}
