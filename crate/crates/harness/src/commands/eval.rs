use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use audioctx::toymodel::{evaluate, load_checkpoint, ModelParams};
use audioctx::{Method, YarnParams};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    chunking, check_temperature, dataset_path, effective_knobs, fmt_seconds, inference_plan, load_dataset,
    parse_split, seconds_to_tokens, DEFAULT_CHUNK_SECONDS, DEFAULT_TOKENS_PER_CHUNK,
};
use crate::output::{ensure_writable, fmt_float, write_csv, write_meta};

/// Columns of every results table (`eval` and `sweep`).
pub const RESULT_COLUMNS: [&str; 8] = [
    "method",
    "anchor_seconds",
    "target_seconds",
    "cutoff",
    "temperature",
    "seed",
    "accuracy",
    "n_items",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub method: Method,
    pub anchor_seconds: f64,
    pub target_seconds: f64,
    pub cutoff: usize,
    pub temperature: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub n_items: usize,
    /// Reported in the metadata sidecar only.
    #[serde(skip)]
    pub wall_time: f64,
}

impl ResultRecord {
    pub fn row(&self) -> Vec<String> {
        vec![
            self.method.name().to_string(),
            fmt_seconds(self.anchor_seconds),
            fmt_seconds(self.target_seconds),
            self.cutoff.to_string(),
            fmt_float(self.temperature),
            self.seed.to_string(),
            fmt_float(self.accuracy),
            self.n_items.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOpts {
    /// [default: model.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by gen-data [default: data]
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// [default: test]
    #[arg(long)]
    pub split: Option<String>,
    /// [default: vanilla,whole-pi,whole-yarn,partial-pi,partial-yarn]
    #[arg(long = "method", alias = "methods", value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Audio lengths the model is taken to handle natively [default: 30,120]
    #[arg(long, value_delimiter = ',')]
    pub anchor_seconds: Option<Vec<f64>>,
    /// Evaluation clip lengths [default: 60,120,300,600]
    #[arg(long, value_delimiter = ',')]
    pub target_seconds: Option<Vec<f64>>,
    /// First interpolated pair for partial-yarn [default: half the pairs]
    #[arg(long)]
    pub cutoff: Option<usize>,
    /// Attention temperature on audio rotations [default: 1.0]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Ramp threshold for whole-yarn [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub beta: Option<f64>,
    /// [default: eval.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 8]
    #[arg(long)]
    pub tokens_per_chunk: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub split: String,
    pub methods: Vec<Method>,
    pub anchor_seconds: Vec<f64>,
    pub target_seconds: Vec<f64>,
    pub cutoff: Option<usize>,
    pub temperature: f64,
    pub yarn: YarnParams,
    pub out: PathBuf,
    pub tokens_per_chunk: usize,
    pub chunk_seconds: f64,
}

impl EvalConfig {
    pub fn resolve(o: EvalOpts) -> Result<Self> {
        let methods = match o.methods {
            Some(names) => names.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>()?,
            None => vec![
                Method::Vanilla,
                Method::WholePi,
                Method::WholeYarn,
                Method::PartialPi,
                Method::PartialYarn2,
            ],
        };
        let defaults = YarnParams::default();
        let cfg = Self {
            checkpoint: o.checkpoint.unwrap_or_else(|| PathBuf::from("model.ckpt")),
            data_dir: o.data_dir.unwrap_or_else(|| PathBuf::from("data")),
            split: o.split.unwrap_or_else(|| "test".into()),
            methods,
            anchor_seconds: o.anchor_seconds.unwrap_or_else(|| vec![30.0, 120.0]),
            target_seconds: o.target_seconds.unwrap_or_else(|| vec![60.0, 120.0, 300.0, 600.0]),
            cutoff: o.cutoff,
            temperature: o.temperature.unwrap_or(1.0),
            yarn: YarnParams::new(o.alpha.unwrap_or(defaults.alpha), o.beta.unwrap_or(defaults.beta))?,
            out: o.out.unwrap_or_else(|| PathBuf::from("eval.csv")),
            tokens_per_chunk: o.tokens_per_chunk.unwrap_or(DEFAULT_TOKENS_PER_CHUNK),
            chunk_seconds: o.chunk_seconds.unwrap_or(DEFAULT_CHUNK_SECONDS),
        };
        parse_split(&cfg.split)?;
        check_temperature(cfg.temperature)?;
        if cfg.methods.is_empty() || cfg.anchor_seconds.is_empty() || cfg.target_seconds.is_empty() {
            bail!("methods, anchors and target lengths must each be non-empty");
        }
        Ok(cfg)
    }
}

pub(crate) fn check_cutoff(model: &ModelParams, cutoff: usize) -> Result<()> {
    let pairs = model.table().num_pairs();
    if cutoff > pairs {
        bail!("cutoff {cutoff} is outside [0, {pairs}] for head dimension {}", model.table().head_dim());
    }
    Ok(())
}

/// One record per (method, anchor, target) in that nesting order.
pub fn evaluate_matrix(cfg: &EvalConfig, model: &ModelParams) -> Result<Vec<ResultRecord>> {
    let ch = chunking(cfg.tokens_per_chunk, cfg.chunk_seconds)?;
    let split = parse_split(&cfg.split)?;
    let cutoff = cfg.cutoff.unwrap_or(model.table().num_pairs() / 2);
    check_cutoff(model, cutoff)?;
    let mut datasets = Vec::new();
    for &target in &cfg.target_seconds {
        let tokens = seconds_to_tokens(&ch, target)?;
        datasets.push(load_dataset(&dataset_path(&cfg.data_dir, split, target), Some(tokens))?);
    }
    let mut records = Vec::new();
    for &method in &cfg.methods {
        for &anchor in &cfg.anchor_seconds {
            let anchor_tokens = seconds_to_tokens(&ch, anchor)?;
            for (&target, data) in cfg.target_seconds.iter().zip(&datasets) {
                let started = Instant::now();
                let acc = evaluate(model, data, |inst| {
                    inference_plan(inst, method, anchor_tokens, cutoff, cfg.temperature, &cfg.yarn, model.table())
                })
                .with_context(|| format!("evaluating {method} at {target} s"))?;
                let (c, t) = effective_knobs(method, cutoff, cfg.temperature);
                records.push(ResultRecord {
                    method,
                    anchor_seconds: anchor,
                    target_seconds: target,
                    cutoff: c,
                    temperature: t,
                    seed: model.seed(),
                    accuracy: acc,
                    n_items: data.len(),
                    wall_time: started.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(records)
}

pub(crate) fn timing(records: &[ResultRecord]) -> serde_json::Value {
    json!(records
        .iter()
        .map(|r| json!({
            "method": r.method.name(),
            "anchor_seconds": r.anchor_seconds,
            "target_seconds": r.target_seconds,
            "cutoff": r.cutoff,
            "temperature": r.temperature,
            "wall_time": r.wall_time,
        }))
        .collect::<Vec<_>>())
}

pub fn run(cfg: &EvalConfig, force: bool) -> Result<Vec<ResultRecord>> {
    let started = Instant::now();
    ensure_writable(&cfg.out, force)?;
    let model = load_checkpoint(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let records = evaluate_matrix(cfg, &model)?;
    let rows: Vec<_> = records.iter().map(ResultRecord::row).collect();
    write_csv(&cfg.out, "eval", cfg, &RESULT_COLUMNS, &rows)?;
    write_meta(&cfg.out, "eval", cfg, &[cfg.out.clone()], started.elapsed(), timing(&records))?;
    Ok(records)
}
