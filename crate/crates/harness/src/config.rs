//! Layered configuration: CLI flags over a TOML file over built-in defaults.
//!
//! The file has one table per subcommand plus a shared `[common]` table:
//!
//! ```toml
//! [common]
//! seed = 7
//! tokens_per_chunk = 8
//!
//! [sweep]
//! cutoffs = [32, 24]
//! temperatures = [0.8, 1.0]
//! ```
//!
//! Keys are the long flag names with `_` for `-`. `[common]` keys apply to
//! every subcommand that has them; a subcommand table may only use its own
//! keys.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SECTIONS: [&str; 6] = ["common", "gen-data", "train", "eval", "sweep", "positions"];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        for (key, value) in &table {
            if !value.is_table() {
                bail!("top-level key `{key}` must sit inside a section");
            }
            if !SECTIONS.contains(&key.as_str()) {
                bail!("unknown section [{key}] (expected one of {SECTIONS:?})");
            }
        }
        let sections = match serde_json::to_value(&table)? {
            Value::Object(m) => m,
            _ => unreachable!("a TOML table serializes to an object"),
        };
        Ok(Self { sections })
    }

    fn table(&self, section: &str) -> Option<&Map<String, Value>> {
        self.sections.get(section).and_then(Value::as_object)
    }

    /// Rejects `[common]` keys that no subcommand understands.
    pub fn check_common(&self, known: &[Map<String, Value>]) -> Result<()> {
        if let Some(common) = self.table("common") {
            for key in common.keys() {
                if !known.iter().any(|k| k.contains_key(key)) {
                    bail!("unknown key `{key}` in [common]");
                }
            }
        }
        Ok(())
    }

    /// Merges `cli` over `[section]` over `[common]`. Fields left `None`
    /// everywhere stay `None` and fall back to the subcommand's defaults.
    pub fn layer<T>(&self, section: &str, cli: &T) -> Result<T>
    where
        T: Serialize + DeserializeOwned + Default,
    {
        let known = option_keys::<T>();
        let mut merged = Map::new();
        if let Some(common) = self.table("common") {
            for (k, v) in common {
                if known.contains_key(k) {
                    merged.insert(k.clone(), v.clone());
                }
            }
        }
        if let Some(table) = self.table(section) {
            for (k, v) in table {
                if !known.contains_key(k) {
                    bail!("unknown key `{k}` in [{section}]");
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        if let Value::Object(flags) = serde_json::to_value(cli)? {
            for (k, v) in flags {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        serde_json::from_value(Value::Object(merged))
            .with_context(|| format!("invalid value in [{section}] configuration"))
    }
}

/// Field names of an all-`Option` options struct.
pub fn option_keys<T: Serialize + Default>() -> Map<String, Value> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}
