//! Experiment harness: configuration files, dataset generation, runs and
//! ablation sweeps with machine-readable outputs.

pub mod config;
pub mod error;
pub mod experiment;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiment::{ResultsDocument, SweepAxis};

#[derive(Debug, Parser)]
#[command(name = "fscil", version, about = "Few-shot class-incremental experiments on a frozen ViT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `output`, else `results`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset to disk.
    Generate(Common),
    /// Run base training and all incremental sessions.
    Run(Common),
    /// Run one experiment per value of an encoder setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `0,3,6` or `attention_qkv,mlp`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Parse and validate a config without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok((cfg, out))
}

/// Executes a parsed command; the message is for stdout.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = load(&common)?;
            let n = experiment::generate(&cfg, &out)?;
            Ok(format!("wrote {n} samples to {}", out.join("manifest.csv").display()))
        }
        Command::Run(common) => {
            let (cfg, out) = load(&common)?;
            let doc = experiment::run(&cfg, &out)?;
            let m = &doc.metrics;
            Ok(format!(
                "s_base {} s_last {} s_avg {} pd {} -> {}",
                experiment::pct(m.s_base),
                experiment::pct(m.s_last),
                experiment::pct(m.s_avg),
                experiment::pct(m.pd),
                out.join("results.json").display()
            ))
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, out) = load(&common)?;
            let docs = experiment::sweep(&cfg, axis, &values, &out)?;
            let mut msg = String::new();
            for ((dir, doc), v) in docs.iter().zip(&values) {
                msg.push_str(&format!(
                    "{}={v}: s_avg {} pd {} ({})\n",
                    axis.as_str(),
                    experiment::pct(doc.metrics.s_avg),
                    experiment::pct(doc.metrics.pd),
                    dir.display()
                ));
            }
            msg.push_str(&format!("comparison: {}", out.join("comparison.csv").display()));
            Ok(msg)
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let counts = cfg.encoder.trainable_parameter_count(cfg.protocol.base_class_count);
            Ok(format!(
                "config ok: {} trainable parameters in the base session",
                counts.total()
            ))
        }
    }
}
