use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use audioctx::toymodel::{evaluate_grid, load_checkpoint, ModelParams};
use audioctx::{Method, YarnParams};
use serde::{Deserialize, Serialize};

use super::eval::{check_cutoff, timing, ResultRecord, RESULT_COLUMNS};
use super::{
    chunking, check_temperature, dataset_path, effective_knobs, inference_plan, load_dataset, parse_split,
    seconds_to_tokens, DEFAULT_CHUNK_SECONDS, DEFAULT_TOKENS_PER_CHUNK,
};
use crate::output::{ensure_writable, write_csv, write_meta};

pub const DEFAULT_CUTOFFS: [usize; 7] = [56, 48, 40, 32, 24, 16, 8];

/// 0.5 to 1.6 in steps of 0.1, each the nearest double to its decimal.
pub fn default_temperatures() -> Vec<f64> {
    (5..=16).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOpts {
    /// [default: model.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Explicit dataset; overrides --data-dir/--split/--target-seconds
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: data]
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// [default: val]
    #[arg(long)]
    pub split: Option<String>,
    /// partial-yarn or partial-yarn3 [default: partial-yarn]
    #[arg(long)]
    pub method: Option<String>,
    /// [default: 120]
    #[arg(long)]
    pub anchor_seconds: Option<f64>,
    /// [default: 600]
    #[arg(long)]
    pub target_seconds: Option<f64>,
    /// [default: 56,48,40,32,24,16,8]
    #[arg(long, value_delimiter = ',')]
    pub cutoffs: Option<Vec<usize>>,
    /// [default: 0.5,0.6,...,1.6]
    #[arg(long, alias = "temps", value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    /// [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub beta: Option<f64>,
    /// [default: sweep.csv]
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
pub struct SweepConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub method: Method,
    pub anchor_seconds: f64,
    pub target_seconds: f64,
    pub cutoffs: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub yarn: YarnParams,
    pub out: PathBuf,
    pub tokens_per_chunk: usize,
    pub chunk_seconds: f64,
}

impl SweepConfig {
    pub fn resolve(o: SweepOpts) -> Result<Self> {
        let target_seconds = o.target_seconds.unwrap_or(600.0);
        let data = match o.data {
            Some(p) => p,
            None => {
                let split = parse_split(o.split.as_deref().unwrap_or("val"))?;
                dataset_path(&o.data_dir.unwrap_or_else(|| PathBuf::from("data")), split, target_seconds)
            }
        };
        let method = Method::parse(o.method.as_deref().unwrap_or("partial-yarn"))?;
        if !matches!(method, Method::PartialYarn2 | Method::PartialYarn3) {
            bail!("sweep tunes partial-yarn or partial-yarn3, not {method}");
        }
        let defaults = YarnParams::default();
        let cfg = Self {
            checkpoint: o.checkpoint.unwrap_or_else(|| PathBuf::from("model.ckpt")),
            data,
            method,
            anchor_seconds: o.anchor_seconds.unwrap_or(120.0),
            target_seconds,
            cutoffs: o.cutoffs.unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec()),
            temperatures: o.temperatures.unwrap_or_else(default_temperatures),
            yarn: YarnParams::new(o.alpha.unwrap_or(defaults.alpha), o.beta.unwrap_or(defaults.beta))?,
            out: o.out.unwrap_or_else(|| PathBuf::from("sweep.csv")),
            tokens_per_chunk: o.tokens_per_chunk.unwrap_or(DEFAULT_TOKENS_PER_CHUNK),
            chunk_seconds: o.chunk_seconds.unwrap_or(DEFAULT_CHUNK_SECONDS),
        };
        if cfg.cutoffs.is_empty() || cfg.temperatures.is_empty() {
            bail!("the grid needs at least one cutoff and one temperature");
        }
        for &t in &cfg.temperatures {
            check_temperature(t)?;
        }
        Ok(cfg)
    }

    /// Grid cells sorted by (cutoff, temperature).
    pub fn cells(&self) -> Vec<(usize, f64)> {
        let mut cells: Vec<(usize, f64)> = self
            .cutoffs
            .iter()
            .flat_map(|&c| self.temperatures.iter().map(move |&t| (c, t)))
            .collect();
        cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        cells
    }
}

/// Evaluates every cell on `data`; one record per cell in sorted order.
pub fn sweep_grid(
    cfg: &SweepConfig,
    model: &ModelParams,
    data: &[audioctx::synthtask::TaskInstance],
) -> Result<Vec<ResultRecord>> {
    let ch = chunking(cfg.tokens_per_chunk, cfg.chunk_seconds)?;
    let anchor_tokens = seconds_to_tokens(&ch, cfg.anchor_seconds)?;
    let cells = cfg.cells();
    for &(c, _) in &cells {
        check_cutoff(model, c)?;
    }
    let started = Instant::now();
    let accuracies = evaluate_grid(model, data, cells.len(), |inst, i| {
        let (c, t) = cells[i];
        inference_plan(inst, cfg.method, anchor_tokens, c, t, &cfg.yarn, model.table())
    })?;
    let per_cell = started.elapsed().as_secs_f64() / cells.len() as f64;
    Ok(cells
        .iter()
        .zip(accuracies)
        .map(|(&(c, t), accuracy)| {
            let (cutoff, temperature) = effective_knobs(cfg.method, c, t);
            ResultRecord {
                method: cfg.method,
                anchor_seconds: cfg.anchor_seconds,
                target_seconds: cfg.target_seconds,
                cutoff,
                temperature,
                seed: model.seed(),
                accuracy,
                n_items: data.len(),
                wall_time: per_cell,
            }
        })
        .collect())
}

/// Highest accuracy; ties go to the earliest record.
pub fn best(records: &[ResultRecord]) -> Option<&ResultRecord> {
    records
        .iter()
        .fold(None, |best: Option<&ResultRecord>, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
}

pub fn run(cfg: &SweepConfig, force: bool) -> Result<Vec<ResultRecord>> {
    let started = Instant::now();
    ensure_writable(&cfg.out, force)?;
    let model = load_checkpoint(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let ch = chunking(cfg.tokens_per_chunk, cfg.chunk_seconds)?;
    let data = load_dataset(&cfg.data, Some(seconds_to_tokens(&ch, cfg.target_seconds)?))?;
    let records = sweep_grid(cfg, &model, &data)?;
    let rows: Vec<_> = records.iter().map(ResultRecord::row).collect();
    write_csv(&cfg.out, "sweep", cfg, &RESULT_COLUMNS, &rows)?;
    write_meta(&cfg.out, "sweep", cfg, &[cfg.out.clone()], started.elapsed(), timing(&records))?;
    Ok(records)
}
