//! Seeded synthetic long-audio multiple-choice retrieval task.
//!
//! Each instance is a stream of filler "audio" tokens with one or more facts
//! embedded in it. A fact is a key token followed by a value span. The question
//! names the key of one fact (the probed fact) and offers four value spans, one
//! of them correct. Distractors are the values of the other facts in the same
//! stream first, then fresh spans.
//!
//! Train, validation and test splits never share a fact: a `(key, value)` pair
//! belongs to exactly one split through the class `(key + first value token)
//! mod 3`. All four choices of an instance belong to the same class as the
//! question's key, so the split rule cannot be used to pick an answer.
//!
//! Token ids: `0` is the sequence start, `1` the question marker, then keys,
//! values and fillers in that order (see [`Vocabulary`]).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::layout::SequenceLayout;

pub const SCHEMA_VERSION: u32 = 1;
pub const BOS_TOKEN: u32 = 0;
pub const QUESTION_TOKEN: u32 = 1;
const RESERVED: u32 = 2;
const CLASSES: u32 = 3;
pub const NUM_CHOICES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_keys: u32,
    pub n_values: u32,
    pub n_fillers: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            n_keys: 24,
            n_values: 24,
            n_fillers: 32,
        }
    }
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        (RESERVED + self.n_keys + self.n_values + self.n_fillers) as usize
    }

    pub fn key(&self, i: u32) -> u32 {
        RESERVED + i
    }

    pub fn value(&self, i: u32) -> u32 {
        RESERVED + self.n_keys + i
    }

    pub fn filler(&self, i: u32) -> u32 {
        RESERVED + self.n_keys + self.n_values + i
    }

    pub fn key_index(&self, token: u32) -> Option<u32> {
        (RESERVED..RESERVED + self.n_keys)
            .contains(&token)
            .then(|| token - RESERVED)
    }

    pub fn value_index(&self, token: u32) -> Option<u32> {
        let lo = RESERVED + self.n_keys;
        (lo..lo + self.n_values).contains(&token).then(|| token - lo)
    }

    fn class_members(count: u32, residue: u32) -> Vec<u32> {
        (0..count).filter(|i| i % CLASSES == residue).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn class(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "depth")]
pub enum DepthDistribution {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_instances: usize,
    pub audio_tokens: usize,
    pub n_facts: usize,
    pub value_span: usize,
    pub vocab: Vocabulary,
    pub depth: DepthDistribution,
    pub split: Split,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n_instances: usize, audio_tokens: usize, split: Split, seed: u64) -> Self {
        Self {
            n_instances,
            audio_tokens,
            n_facts: 1,
            value_span: 1,
            vocab: Vocabulary::default(),
            depth: DepthDistribution::Uniform,
            split,
            seed,
        }
    }

    pub fn fact_len(&self) -> usize {
        1 + self.value_span
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_facts == 0 {
            return Err(invalid("n_facts must be at least 1"));
        }
        if self.value_span == 0 {
            return Err(invalid("value_span must be at least 1"));
        }
        if self.n_facts * self.fact_len() > self.audio_tokens {
            return Err(invalid(format!(
                "{} facts of {} tokens do not fit in {} audio tokens",
                self.n_facts,
                self.fact_len(),
                self.audio_tokens
            )));
        }
        if let DepthDistribution::Fixed(d) = self.depth {
            if !(0.0..=1.0).contains(&d) {
                return Err(invalid(format!("fixed depth {d} outside [0, 1]")));
            }
        }
        let v = &self.vocab;
        if v.n_fillers == 0 {
            return Err(invalid("vocabulary needs at least one filler token"));
        }
        if (v.n_keys / CLASSES) < self.n_facts as u32 {
            return Err(invalid(format!(
                "{} keys cannot supply {} distinct keys per class",
                v.n_keys, self.n_facts
            )));
        }
        let per_class = (v.n_values / CLASSES) as u64
            * (v.n_values as u64).pow(self.value_span as u32 - 1);
        if per_class < NUM_CHOICES.max(self.n_facts) as u64 {
            return Err(invalid(format!(
                "{} values cannot supply {} distinct spans per class",
                v.n_values,
                NUM_CHOICES.max(self.n_facts)
            )));
        }
        Ok(())
    }

    /// Short content hash recorded with every instance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset spec serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub seed: u64,
    pub spec_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    #[serde(rename = "audio")]
    pub audio_tokens: Vec<u32>,
    #[serde(rename = "question")]
    pub question_tokens: Vec<u32>,
    pub choices: [Vec<u32>; NUM_CHOICES],
    #[serde(rename = "answer")]
    pub answer_index: usize,
    #[serde(rename = "depth")]
    pub fact_depth: f64,
    pub meta: InstanceMeta,
}

impl TaskInstance {
    /// `[start] ++ audio ++ question`.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut tokens = Vec::with_capacity(1 + self.audio_tokens.len() + self.question_tokens.len());
        tokens.push(BOS_TOKEN);
        tokens.extend_from_slice(&self.audio_tokens);
        tokens.extend_from_slice(&self.question_tokens);
        tokens
    }

    pub fn prompt_layout(&self) -> SequenceLayout {
        SequenceLayout::text_audio_text(1, self.audio_tokens.len(), self.question_tokens.len())
    }

    fn validate(&self) -> Result<()> {
        if self.answer_index >= NUM_CHOICES {
            return Err(invalid(format!("answer index {} out of range", self.answer_index)));
        }
        if self.audio_tokens.is_empty() {
            return Err(invalid("instance has no audio tokens"));
        }
        if self.choices.iter().any(Vec::is_empty) {
            return Err(invalid("empty answer choice"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    schema_version: u32,
    #[serde(flatten)]
    instance: TaskInstance,
}

/// Seed for instance `index` of a split; instances can be generated in any
/// order or sharded.
fn instance_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        ^ (split.class() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let hash = spec.hash();
    (0..spec.n_instances)
        .map(|i| generate_one(spec, i, &hash))
        .collect()
}

fn random_span(rng: &mut ChaCha8Rng, spec: &DatasetSpec, first_choices: &[u32]) -> Vec<u32> {
    let v = &spec.vocab;
    let mut span = Vec::with_capacity(spec.value_span);
    span.push(v.value(*first_choices.choose(rng).expect("non-empty class")));
    for _ in 1..spec.value_span {
        span.push(v.value(rng.gen_range(0..v.n_values)));
    }
    span
}

fn generate_one(spec: &DatasetSpec, index: usize, hash: &str) -> Result<TaskInstance> {
    let seed = instance_seed(spec.seed, spec.split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = spec.vocab;
    let len = spec.audio_tokens;
    let fact_len = spec.fact_len();

    let mut audio: Vec<u32> = (0..len)
        .map(|_| v.filler(rng.gen_range(0..v.n_fillers)))
        .collect();

    let depth = match spec.depth {
        DepthDistribution::Uniform => rng.gen::<f64>(),
        DepthDistribution::Fixed(d) => d,
    };
    let room = len - fact_len;
    let probed_start = (depth * room as f64).round() as usize;
    let fact_depth = if room == 0 {
        0.0
    } else {
        probed_start as f64 / room as f64
    };

    let residue = rng.gen_range(0..CLASSES);
    let keys: Vec<u32> = Vocabulary::class_members(v.n_keys, residue)
        .choose_multiple(&mut rng, spec.n_facts)
        .copied()
        .collect();
    let value_class = Vocabulary::class_members(v.n_values, (CLASSES + spec.split.class() - residue) % CLASSES);
    let mut values: Vec<Vec<u32>> = Vec::with_capacity(spec.n_facts);
    while values.len() < spec.n_facts {
        let span = random_span(&mut rng, spec, &value_class);
        if !values.contains(&span) {
            values.push(span);
        }
    }

    let mut occupied = vec![false; len];
    let place = |start: usize, occupied: &mut Vec<bool>| {
        occupied[start..start + fact_len].iter_mut().for_each(|o| *o = true);
    };
    let mut starts = vec![probed_start];
    place(probed_start, &mut occupied);
    for _ in 1..spec.n_facts {
        let fits = |s: usize, occ: &[bool]| occ[s..s + fact_len].iter().all(|o| !o);
        let mut chosen = None;
        for _ in 0..64 {
            let s = rng.gen_range(0..=room);
            if fits(s, &occupied) {
                chosen = Some(s);
                break;
            }
        }
        let s = chosen
            .or_else(|| (0..=room).find(|&s| fits(s, &occupied)))
            .ok_or_else(|| invalid("facts do not fit in the audio stream"))?;
        place(s, &mut occupied);
        starts.push(s);
    }
    for ((start, key), value) in starts.iter().zip(&keys).zip(&values) {
        audio[*start] = v.key(*key);
        audio[start + 1..start + fact_len].copy_from_slice(value);
    }

    let correct = values[0].clone();
    let mut distractors: Vec<Vec<u32>> = values[1..].to_vec();
    distractors.shuffle(&mut rng);
    distractors.truncate(NUM_CHOICES - 1);
    while distractors.len() < NUM_CHOICES - 1 {
        let span = random_span(&mut rng, spec, &value_class);
        if span != correct && !distractors.contains(&span) {
            distractors.push(span);
        }
    }
    let answer_index = rng.gen_range(0..NUM_CHOICES);
    let mut choices: [Vec<u32>; NUM_CHOICES] = Default::default();
    let mut rest = distractors.into_iter();
    for (i, slot) in choices.iter_mut().enumerate() {
        *slot = if i == answer_index {
            correct.clone()
        } else {
            rest.next().expect("three distractors")
        };
    }

    Ok(TaskInstance {
        audio_tokens: audio,
        question_tokens: vec![QUESTION_TOKEN, v.key(keys[0])],
        choices,
        answer_index,
        fact_depth,
        meta: InstanceMeta {
            seed: spec.seed,
            spec_hash: hash.to_string(),
        },
    })
}

/// Answers by reading the fact out of the stream directly.
pub fn oracle_predict(instance: &TaskInstance, value_span: usize) -> Option<usize> {
    let key = *instance.question_tokens.last()?;
    let start = instance.audio_tokens.iter().position(|&t| t == key)?;
    let value = instance.audio_tokens.get(start + 1..start + 1 + value_span)?;
    instance.choices.iter().position(|c| c.as_slice() == value)
}

pub fn score(predictions: &[usize], instances: &[TaskInstance]) -> Result<f64> {
    if predictions.len() != instances.len() {
        return Err(invalid(format!(
            "{} predictions for {} instances",
            predictions.len(),
            instances.len()
        )));
    }
    if instances.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions
        .iter()
        .zip(instances)
        .filter(|(p, inst)| **p == inst.answer_index)
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

pub fn write_jsonl<W: Write>(instances: &[TaskInstance], mut out: W) -> Result<()> {
    for inst in instances {
        let rec = Record {
            schema_version: SCHEMA_VERSION,
            instance: inst.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(parse_err(format!(
                "unsupported schema_version {}",
                rec.schema_version
            )));
        }
        rec.instance.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.instance);
    }
    Ok(out)
}

pub fn export_jsonl(instances: &[TaskInstance], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(instances, BufWriter::new(File::create(path)?))
}

pub fn import_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    read_jsonl(BufReader::new(File::open(path)?))
}
