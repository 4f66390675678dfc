//! CSV and JSON writers shared by the subcommands.
//!
//! Every CSV starts with two `#` lines: the table kind with the schema
//! version, and the effective configuration as one-line JSON. Then comes the
//! column header. Floats are written with 17 significant digits so values
//! round-trip exactly. Timing lives only in the `.meta.json` sidecar, which
//! keeps the CSV bytes a pure function of the configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

/// `results.csv` -> `results.meta.json`.
pub fn meta_path(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}

/// `model.ckpt` + `trace` -> `model.trace.csv`.
pub fn sibling(out: &Path, tag: &str, ext: &str) -> PathBuf {
    out.with_extension(format!("{tag}.{ext}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub fn write_csv<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "# audioctx {kind} schema_version={CSV_SCHEMA_VERSION}")?;
    writeln!(out, "# config={}", serde_json::to_string(config)?)?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(columns)?;
        for row in rows {
            debug_assert_eq!(row.len(), columns.len());
            w.write_record(row)?;
        }
        w.flush()?;
    }
    out.flush()?;
    Ok(())
}

/// Column header and rows of a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn write_meta<C: Serialize>(
    out: &Path,
    command: &str,
    config: &C,
    outputs: &[PathBuf],
    wall_time: Duration,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = json!({
        "command": command,
        "schema_version": CSV_SCHEMA_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "outputs": outputs,
        "wall_time_seconds": wall_time.as_secs_f64(),
        "details": extra,
    });
    let mut f = create(&meta_path(out))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}
