use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use audioctx::synthtask::{export_jsonl, generate, DatasetSpec, Split};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{chunking, dataset_path, seconds_to_tokens, DEFAULT_CHUNK_SECONDS, DEFAULT_TOKENS_PER_CHUNK};
use crate::output::{ensure_writable, write_meta};

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataOpts {
    /// Output directory [default: data]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluation clip lengths in minutes [default: 1,2,5,10]
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<f64>>,
    /// Training clip length in minutes [default: 2]
    #[arg(long)]
    pub train_minutes: Option<f64>,
    /// [default: 2000]
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation items per length [default: 300]
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test items per length [default: 400]
    #[arg(long)]
    pub n_test: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub n_facts: Option<usize>,
    /// Tokens per fact value [default: 1]
    #[arg(long)]
    pub value_span: Option<usize>,
    /// [default: 0]
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
pub struct GenDataConfig {
    pub out: PathBuf,
    pub lengths_minutes: Vec<f64>,
    pub train_minutes: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_facts: usize,
    pub value_span: usize,
    pub seed: u64,
    pub tokens_per_chunk: usize,
    pub chunk_seconds: f64,
}

impl GenDataConfig {
    pub fn resolve(o: GenDataOpts) -> Result<Self> {
        let cfg = Self {
            out: o.out.unwrap_or_else(|| PathBuf::from("data")),
            lengths_minutes: o.lengths.unwrap_or_else(|| vec![1.0, 2.0, 5.0, 10.0]),
            train_minutes: o.train_minutes.unwrap_or(2.0),
            n_train: o.n_train.unwrap_or(2000),
            n_val: o.n_val.unwrap_or(300),
            n_test: o.n_test.unwrap_or(400),
            n_facts: o.n_facts.unwrap_or(1),
            value_span: o.value_span.unwrap_or(1),
            seed: o.seed.unwrap_or(0),
            tokens_per_chunk: o.tokens_per_chunk.unwrap_or(DEFAULT_TOKENS_PER_CHUNK),
            chunk_seconds: o.chunk_seconds.unwrap_or(DEFAULT_CHUNK_SECONDS),
        };
        if cfg.lengths_minutes.is_empty() {
            bail!("at least one evaluation length is required");
        }
        if let Some(m) = cfg.lengths_minutes.iter().chain([&cfg.train_minutes]).find(|m| !(**m > 0.0)) {
            bail!("clip lengths must be positive, got {m}");
        }
        Ok(cfg)
    }

    fn spec(&self, n: usize, minutes: f64, split: Split) -> Result<DatasetSpec> {
        let ch = chunking(self.tokens_per_chunk, self.chunk_seconds)?;
        let mut spec = DatasetSpec::new(n, seconds_to_tokens(&ch, minutes * 60.0)?, split, self.seed);
        spec.n_facts = self.n_facts;
        spec.value_span = self.value_span;
        Ok(spec)
    }

    /// Every `(path, spec)` the command writes.
    pub fn plan(&self) -> Result<Vec<(PathBuf, DatasetSpec)>> {
        let mut files = Vec::new();
        if self.n_train > 0 {
            let spec = self.spec(self.n_train, self.train_minutes, Split::Train)?;
            files.push((dataset_path(&self.out, Split::Train, 0.0), spec));
        }
        for &m in &self.lengths_minutes {
            for (split, n) in [(Split::Validation, self.n_val), (Split::Test, self.n_test)] {
                if n > 0 {
                    files.push((dataset_path(&self.out, split, m * 60.0), self.spec(n, m, split)?));
                }
            }
        }
        Ok(files)
    }
}

pub fn run(cfg: &GenDataConfig, force: bool) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let files = cfg.plan()?;
    for (path, _) in &files {
        ensure_writable(path, force)?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    let mut details = Vec::new();
    for (path, spec) in &files {
        spec.validate()?;
        export_jsonl(&generate(spec)?, path)?;
        details.push(json!({
            "file": path,
            "split": spec.split.name(),
            "audio_tokens": spec.audio_tokens,
            "n_instances": spec.n_instances,
            "spec_hash": spec.hash(),
        }));
        written.push(path.clone());
    }
    write_meta(
        &cfg.out.join("gen_data.csv"),
        "gen-data",
        cfg,
        &written,
        started.elapsed(),
        json!(details),
    )?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_has_one_test_file_per_length() {
        let cfg = GenDataConfig::resolve(GenDataOpts::default()).unwrap();
        let files = cfg.plan().unwrap();
        let tests: Vec<_> = files.iter().filter(|(_, s)| s.split == Split::Test).collect();
        assert_eq!(tests.len(), 4);
        let tokens: Vec<usize> = tests.iter().map(|(_, s)| s.audio_tokens).collect();
        assert_eq!(tokens, vec![16, 32, 80, 160]);
        assert!(tests[3].0.ends_with("test_600s.jsonl"));
    }

    #[test]
    fn single_length() {
        let cfg = GenDataConfig::resolve(GenDataOpts {
            lengths: Some(vec![1.0]),
            ..GenDataOpts::default()
        })
        .unwrap();
        let n_test = cfg.plan().unwrap().iter().filter(|(_, s)| s.split == Split::Test).count();
        assert_eq!(n_test, 1);
        assert!(GenDataConfig::resolve(GenDataOpts {
            lengths: Some(vec![]),
            ..GenDataOpts::default()
        })
        .is_err());
    }
}
