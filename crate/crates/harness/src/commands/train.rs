use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use audioctx::synthtask::Vocabulary;
use audioctx::toymodel::{
    check_training_method, save_checkpoint, train, ModelConfig, ModelParams, TrainConfig, TrainOutcome,
    VlatStrategy,
};
use audioctx::{Error, Method};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{chunking, load_dataset, seconds_to_tokens, DEFAULT_CHUNK_SECONDS, DEFAULT_TOKENS_PER_CHUNK};
use crate::output::{ensure_writable, fmt_float, sibling, write_csv, write_meta};

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    /// Training JSONL [default: data/train.jsonl]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path; traces and metadata are written next to it [default: model.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// none, default, dense100, dense1000, limited, fixed20 [default: none]
    #[arg(long)]
    pub strategy: Option<String>,
    /// Replace every virtual window factor draw with this value
    #[arg(long)]
    pub force_factor: Option<f64>,
    /// Positional scheme; training supports vanilla positions (whole-yarn is refused with VLAT) [default: vanilla]
    #[arg(long)]
    pub method: Option<String>,
    /// [default: 1]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 5e-5]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Audio seconds one virtual window factor unit covers [default: 30]
    #[arg(long)]
    pub base_seconds: Option<f64>,
    /// Head width; the default sweep grid needs at least 56 pairs [default: 128]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub rope_base: Option<f64>,
    /// [default: size of the generator's vocabulary]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Seeds weight init, data order and factor draws [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 8]
    #[arg(long)]
    pub tokens_per_chunk: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub strategy: VlatStrategy,
    pub method: Method,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub base_seconds: f64,
    pub tokens_per_chunk: usize,
    pub chunk_seconds: f64,
}

impl TrainRunConfig {
    pub fn resolve(o: TrainOpts) -> Result<Self> {
        let strategy = VlatStrategy::parse(o.strategy.as_deref().unwrap_or("none"))?;
        let method = Method::parse(o.method.as_deref().unwrap_or("vanilla"))?;
        check_training_method(method, strategy)?;
        if method != Method::Vanilla {
            bail!("training uses plain positions (optionally with VLAT); apply `{method}` at eval time");
        }
        let tokens_per_chunk = o.tokens_per_chunk.unwrap_or(DEFAULT_TOKENS_PER_CHUNK);
        let chunk_seconds = o.chunk_seconds.unwrap_or(DEFAULT_CHUNK_SECONDS);
        let base_seconds = o.base_seconds.unwrap_or(30.0);
        let ch = chunking(tokens_per_chunk, chunk_seconds)?;
        let seed = o.seed.unwrap_or(0);
        let defaults = TrainConfig::default();
        let model = ModelConfig {
            vocab_size: o.vocab_size.unwrap_or_else(|| Vocabulary::default().size()),
            embed_dim: o.embed_dim.unwrap_or(128),
            n_layers: o.n_layers.unwrap_or(2),
            mlp_hidden: o.mlp_hidden.unwrap_or(32),
            rope_base: o.rope_base.unwrap_or(100.0),
        };
        model.validate()?;
        let train = TrainConfig {
            learning_rate: o.learning_rate.unwrap_or(defaults.learning_rate),
            batch_size: o.batch_size.unwrap_or(defaults.batch_size),
            grad_clip_norm: o.grad_clip_norm.unwrap_or(defaults.grad_clip_norm),
            epochs: o.epochs.unwrap_or(defaults.epochs),
            weight_decay: o.weight_decay.unwrap_or(defaults.weight_decay),
            seed,
            base_audio_context: seconds_to_tokens(&ch, base_seconds)?,
            forced_factor: o.force_factor,
        };
        train.validate()?;
        Ok(Self {
            data: o.data.unwrap_or_else(|| PathBuf::from("data/train.jsonl")),
            out: o.out.unwrap_or_else(|| PathBuf::from("model.ckpt")),
            strategy,
            method,
            model,
            train,
            base_seconds,
            tokens_per_chunk,
            chunk_seconds,
        })
    }

    pub fn trace_path(&self) -> PathBuf {
        sibling(&self.out, "trace", "csv")
    }

    pub fn epochs_path(&self) -> PathBuf {
        sibling(&self.out, "epochs", "csv")
    }
}

fn step_rows(losses: &[f64], steps_per_epoch: usize) -> Vec<Vec<String>> {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), (i / steps_per_epoch.max(1)).to_string(), fmt_float(*l)])
        .collect()
}

/// Trains and writes the checkpoint, a per-step loss trace, per-epoch
/// means and a metadata sidecar. On divergence the trace up to the failure
/// is still written before the error is returned.
pub fn run(cfg: &TrainRunConfig, force: bool) -> Result<TrainOutcome> {
    let started = Instant::now();
    for p in [cfg.out.clone(), cfg.trace_path(), cfg.epochs_path()] {
        ensure_writable(&p, force)?;
    }
    let data = load_dataset(&cfg.data, None)?;
    let init = ModelParams::init(cfg.model, cfg.train.seed)?;
    let steps_per_epoch = data.len().div_ceil(cfg.train.batch_size);
    let trace_cols = ["step", "epoch", "loss"];
    let outcome = match train(&init, &data, &cfg.train, cfg.strategy) {
        Ok(o) => o,
        Err(Error::Diverged { message, losses }) => {
            write_csv(&cfg.trace_path(), "train-trace", cfg, &trace_cols, &step_rows(&losses, steps_per_epoch))?;
            bail!("training diverged: {message} (trace kept in {})", cfg.trace_path().display());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&outcome.params, &cfg.out)?;
    write_csv(
        &cfg.trace_path(),
        "train-trace",
        cfg,
        &trace_cols,
        &step_rows(&outcome.trace.step_losses, steps_per_epoch),
    )?;
    let epoch_rows: Vec<Vec<String>> = outcome
        .trace
        .epochs
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.steps.to_string(), fmt_float(e.mean_loss)])
        .collect();
    write_csv(&cfg.epochs_path(), "train-epochs", cfg, &["epoch", "steps", "mean_loss"], &epoch_rows)?;
    write_meta(
        &cfg.out,
        "train",
        cfg,
        &[cfg.out.clone(), cfg.trace_path(), cfg.epochs_path()],
        started.elapsed(),
        json!({ "n_params": outcome.params.weights().len(), "n_items": data.len() }),
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_yarn_with_vlat_is_refused() {
        let o = TrainOpts {
            method: Some("whole-yarn".into()),
            strategy: Some("default".into()),
            ..TrainOpts::default()
        };
        assert!(TrainRunConfig::resolve(o).is_err());
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let cfg = TrainRunConfig::resolve(TrainOpts::default()).unwrap();
        assert_eq!(cfg.train.learning_rate, 5e-5);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.grad_clip_norm, 1.0);
        assert_eq!(cfg.train.base_audio_context, 8);
        assert_eq!(cfg.trace_path(), PathBuf::from("model.trace.csv"));
    }
}
