//! Command-line front end for the `audioctx` library.
//!
//! Every subcommand resolves its options as CLI flags over the matching
//! `[section]` of an optional TOML file over built-in defaults, echoes the
//! effective configuration into each CSV it writes, and refuses to overwrite
//! existing outputs unless `--force` is given.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::eval::{EvalConfig, EvalOpts};
use commands::gen_data::{GenDataConfig, GenDataOpts};
use commands::positions::{PositionsConfig, PositionsOpts};
use commands::sweep::{SweepConfig, SweepOpts};
use commands::train::{TrainOpts, TrainRunConfig};
use config::{option_keys, ConfigFile};

#[derive(Debug, Parser)]
#[command(name = "audioctx", version, about = "Audio-only RoPE context extension experiments")]
pub struct Cli {
    /// TOML file with a [common] table and one table per subcommand
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train, validation and test JSONL files
    GenData(GenDataOpts),
    /// Train the toy model, vanilla or with virtual-length windows
    Train(TrainOpts),
    /// Compare extension methods across anchors and clip lengths
    Eval(EvalOpts),
    /// Grid-search cutoff and temperature for partial YaRN
    Sweep(SweepOpts),
    /// Dump the per-token position plan of one method
    Positions(PositionsOpts),
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.check_common(&[
        option_keys::<GenDataOpts>(),
        option_keys::<TrainOpts>(),
        option_keys::<EvalOpts>(),
        option_keys::<SweepOpts>(),
        option_keys::<PositionsOpts>(),
    ])?;
    match &cli.command {
        Command::GenData(o) => {
            let cfg = GenDataConfig::resolve(file.layer("gen-data", o)?)?;
            for path in commands::gen_data::run(&cfg, cli.force)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train(o) => {
            let cfg = TrainRunConfig::resolve(file.layer("train", o)?)?;
            let outcome = commands::train::run(&cfg, cli.force)?;
            if let Some(last) = outcome.trace.epochs.last() {
                println!("epoch {} mean loss {:.6}", last.epoch, last.mean_loss);
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval(o) => {
            let cfg = EvalConfig::resolve(file.layer("eval", o)?)?;
            let records = commands::eval::run(&cfg, cli.force)?;
            for r in &records {
                println!(
                    "{:<13} anchor {:>5}s target {:>5}s acc {:.4}",
                    r.method.name(),
                    r.anchor_seconds,
                    r.target_seconds,
                    r.accuracy
                );
            }
        }
        Command::Sweep(o) => {
            let cfg = SweepConfig::resolve(file.layer("sweep", o)?)?;
            let records = commands::sweep::run(&cfg, cli.force)?;
            if let Some(b) = commands::sweep::best(&records) {
                println!(
                    "{} cells, best cutoff {} temperature {} acc {:.4}",
                    records.len(),
                    b.cutoff,
                    b.temperature,
                    b.accuracy
                );
            }
        }
        Command::Positions(o) => {
            let cfg = PositionsConfig::resolve(file.layer("positions", o)?)?;
            let n = commands::positions::run(&cfg, cli.force)?;
            println!("wrote {} rows to {}", n, cfg.out.display());
        }
    }
    Ok(())
}
