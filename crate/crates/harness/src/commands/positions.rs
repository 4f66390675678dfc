use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use audioctx::extension::build_plan;
use audioctx::{ExtensionConfig, FrequencyTable, Method, Modality, PositionPlan, SequenceLayout, YarnParams};
use serde::{Deserialize, Serialize};

use super::{chunking, check_temperature, effective_knobs, seconds_to_tokens, DEFAULT_CHUNK_SECONDS, DEFAULT_TOKENS_PER_CHUNK};
use crate::output::{ensure_writable, fmt_float, write_csv, write_meta};

pub const POSITION_COLUMNS: [&str; 7] = [
    "token_index",
    "modality",
    "interp_position",
    "extrap_position",
    "magnitude",
    "pair",
    "angle",
];

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionsOpts {
    /// Explicit layout such as `text:4,audio:88,text:2`; overrides the length flags
    #[arg(long)]
    pub layout: Option<String>,
    /// Text tokens before the audio [default: 1]
    #[arg(long)]
    pub prefix_tokens: Option<usize>,
    /// Text tokens after the audio [default: 8]
    #[arg(long)]
    pub suffix_tokens: Option<usize>,
    /// Clip length [default: 600]
    #[arg(long)]
    pub target_seconds: Option<f64>,
    /// [default: partial-yarn]
    #[arg(long)]
    pub method: Option<String>,
    /// [default: 120]
    #[arg(long)]
    pub anchor_seconds: Option<f64>,
    /// Anchor in tokens; overrides --anchor-seconds
    #[arg(long)]
    pub anchor_tokens: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub cutoff: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// [default: 128]
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// [default: 10000]
    #[arg(long)]
    pub rope_base: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Pair whose angle is reported [default: the lowest-frequency pair]
    #[arg(long)]
    pub pair: Option<usize>,
    /// [default: positions.csv]
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
pub struct PositionsConfig {
    pub layout: String,
    pub method: Method,
    pub anchor_tokens: usize,
    pub cutoff: usize,
    pub temperature: f64,
    pub head_dim: usize,
    pub rope_base: f64,
    pub yarn: YarnParams,
    pub pair: usize,
    pub out: PathBuf,
}

impl PositionsConfig {
    pub fn resolve(o: PositionsOpts) -> Result<Self> {
        let ch = chunking(
            o.tokens_per_chunk.unwrap_or(DEFAULT_TOKENS_PER_CHUNK),
            o.chunk_seconds.unwrap_or(DEFAULT_CHUNK_SECONDS),
        )?;
        let layout = match o.layout {
            Some(l) => l,
            None => format!(
                "text:{},audio:{},text:{}",
                o.prefix_tokens.unwrap_or(1),
                seconds_to_tokens(&ch, o.target_seconds.unwrap_or(600.0))?,
                o.suffix_tokens.unwrap_or(8)
            ),
        };
        let anchor_tokens = match o.anchor_tokens {
            Some(t) => t,
            None => seconds_to_tokens(&ch, o.anchor_seconds.unwrap_or(120.0))?,
        };
        let head_dim = o.head_dim.unwrap_or(128);
        let defaults = YarnParams::default();
        let cfg = Self {
            layout,
            method: Method::parse(o.method.as_deref().unwrap_or("partial-yarn"))?,
            anchor_tokens,
            cutoff: o.cutoff.unwrap_or(32),
            temperature: o.temperature.unwrap_or(1.0),
            head_dim,
            rope_base: o.rope_base.unwrap_or(10_000.0),
            yarn: YarnParams::new(o.alpha.unwrap_or(defaults.alpha), o.beta.unwrap_or(defaults.beta))?,
            pair: o.pair.unwrap_or((head_dim / 2).saturating_sub(1)),
            out: o.out.unwrap_or_else(|| PathBuf::from("positions.csv")),
        };
        check_temperature(cfg.temperature)?;
        if cfg.pair >= head_dim / 2 {
            bail!("pair {} is outside [0, {})", cfg.pair, head_dim / 2);
        }
        if cfg.cutoff > head_dim / 2 {
            bail!("cutoff {} is outside [0, {}]", cfg.cutoff, head_dim / 2);
        }
        Ok(cfg)
    }
}

/// The plan and the modality of each of its tokens.
pub fn build(cfg: &PositionsConfig) -> Result<(PositionPlan, Vec<Modality>, FrequencyTable)> {
    let layout = SequenceLayout::parse(&cfg.layout)?;
    let table = FrequencyTable::new(cfg.head_dim, cfg.rope_base)?;
    let audio: usize = layout
        .segments()
        .iter()
        .filter(|s| s.modality == Modality::Audio)
        .map(|s| s.token_count)
        .sum();
    let plan = if cfg.method == Method::Vanilla {
        audioctx::extension::plan_vanilla(layout.total_tokens())
    } else {
        let (c, t) = effective_knobs(cfg.method, cfg.cutoff, cfg.temperature);
        let ext = ExtensionConfig::new(cfg.method, cfg.anchor_tokens, audio, c, t)?;
        build_plan(&ext, &layout, &table, &cfg.yarn)?
    };
    let modalities = layout
        .segments()
        .iter()
        .flat_map(|s| std::iter::repeat(s.modality).take(s.token_count))
        .collect();
    Ok((plan, modalities, table))
}

pub fn rows(cfg: &PositionsConfig) -> Result<Vec<Vec<String>>> {
    let (plan, modalities, table) = build(cfg)?;
    let mut out = Vec::with_capacity(plan.len());
    for (j, modality) in modalities.iter().enumerate() {
        let angle = plan.effective_angles(&table, j)?.angles[cfg.pair];
        out.push(vec![
            j.to_string(),
            match modality {
                Modality::Text => "text",
                Modality::Audio => "audio",
            }
            .to_string(),
            fmt_float(plan.interp_positions()[j]),
            fmt_float(plan.extrap_positions()[j]),
            fmt_float(plan.magnitudes()[j]),
            cfg.pair.to_string(),
            fmt_float(angle),
        ]);
    }
    Ok(out)
}

pub fn run(cfg: &PositionsConfig, force: bool) -> Result<usize> {
    let started = Instant::now();
    ensure_writable(&cfg.out, force)?;
    let rows = rows(cfg)?;
    write_csv(&cfg.out, "positions", cfg, &POSITION_COLUMNS, &rows)?;
    write_meta(&cfg.out, "positions", cfg, &[cfg.out.clone()], started.elapsed(), serde_json::json!({ "n_tokens": rows.len() }))?;
    Ok(rows.len())
}
