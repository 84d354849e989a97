//! Deterministic artifact writers: CSV, JSON, JSON-lines, resolved config.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use refprior::Result;

/// 17 significant digits, enough for a 64-bit float to round-trip exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with a header row; the caller pre-formats every cell.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        text.push_str(&serde_json::to_string(record)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// The fully resolved configuration, in the same `key = value` format the
/// `--config` flag reads, so a dumped file reproduces its run verbatim.
pub fn write_resolved_config(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in entries {
        let _ = writeln!(text, "{key} = {value}");
    }
    std::fs::write(dir.join("config.resolved"), text)?;
    Ok(())
}
