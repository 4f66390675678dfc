pub mod eval;
pub mod gen_data;
pub mod positions;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use audioctx::extension::{build_plan, plan_vanilla};
use audioctx::synthtask::{import_jsonl, Split, TaskInstance};
use audioctx::{ChunkingConfig, ExtensionConfig, FrequencyTable, Method, PositionPlan, YarnParams};

/// Desk-scale audio rate: a 10-minute clip is 160 tokens.
pub const DEFAULT_TOKENS_PER_CHUNK: usize = 8;
pub const DEFAULT_CHUNK_SECONDS: f64 = 30.0;

pub(crate) fn chunking(tokens_per_chunk: usize, chunk_seconds: f64) -> Result<ChunkingConfig> {
    Ok(ChunkingConfig::new(chunk_seconds, tokens_per_chunk)?)
}

pub(crate) fn seconds_to_tokens(ch: &ChunkingConfig, seconds: f64) -> Result<usize> {
    ch.tokens_for(seconds)
        .with_context(|| format!("converting {seconds} s of audio to tokens"))
}

/// `60` -> `"60"`, `90.5` -> `"90.5"`.
pub fn fmt_seconds(seconds: f64) -> String {
    if seconds.fract() == 0.0 {
        format!("{seconds:.0}")
    } else {
        format!("{seconds}")
    }
}

/// Where `gen-data` puts the `split` file for clips of `seconds`.
pub fn dataset_path(dir: &Path, split: Split, seconds: f64) -> PathBuf {
    match split {
        Split::Train => dir.join("train.jsonl"),
        _ => dir.join(format!("{}_{}s.jsonl", split.name(), fmt_seconds(seconds))),
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" | "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    }
}

pub(crate) fn load_dataset(path: &Path, audio_tokens: Option<usize>) -> Result<Vec<TaskInstance>> {
    let data = import_jsonl(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    if let Some(n) = audio_tokens {
        if let Some(bad) = data.iter().find(|i| i.audio_tokens.len() != n) {
            bail!(
                "dataset {} holds {}-token clips, expected {n} (check --tokens-per-chunk)",
                path.display(),
                bad.audio_tokens.len()
            );
        }
    }
    Ok(data)
}

/// Cutoff and temperature a method actually uses; the others run at 0 and 1.
pub fn effective_knobs(method: Method, cutoff: usize, temperature: f64) -> (usize, f64) {
    match method {
        Method::PartialYarn2 => (cutoff, temperature),
        Method::PartialYarn3 => (0, temperature),
        _ => (0, 1.0),
    }
}

/// Inference-time plan. Extension only applies when the clip is longer than
/// the anchor; shorter clips already sit inside the familiar window.
pub fn inference_plan(
    instance: &TaskInstance,
    method: Method,
    anchor_tokens: usize,
    cutoff: usize,
    temperature: f64,
    yarn: &YarnParams,
    table: &FrequencyTable,
) -> audioctx::Result<PositionPlan> {
    let layout = instance.prompt_layout();
    let audio = instance.audio_tokens.len();
    if method == Method::Vanilla || audio <= anchor_tokens {
        return Ok(plan_vanilla(layout.total_tokens()));
    }
    let (c, t) = effective_knobs(method, cutoff, temperature);
    let cfg = ExtensionConfig::new(method, anchor_tokens, audio, c, t)?;
    build_plan(&cfg, &layout, table, yarn)
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        bail!("temperature must be positive, got {t}");
    }
    Ok(())
}
