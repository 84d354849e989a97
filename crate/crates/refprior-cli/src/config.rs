//! Flat `key = value` run configuration.
//!
//! A config file holds one assignment per line; `#` starts a comment and
//! blank lines are skipped. Command-line flags override file values, and
//! file values override built-in defaults. Every key a subcommand does not
//! recognize is an error, so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use refprior::{Error, Result};

/// Key-value pairs read from a config file, consumed key by key.
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Loads the file, or yields the empty map when no path was given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::empty());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Usage(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Usage(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Removes and parses one key; `None` when the file does not set it.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Usage(format!("config key `{key}`: cannot parse {raw:?}: {e}"))),
        }
    }

    /// Rejects whatever was never consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        Err(Error::Usage(format!("unknown config keys: {}", keys.join(", "))))
    }
}

/// Three-level precedence: explicit flag, then config file, then default.
pub fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

/// A value that must arrive from the flag or the file.
pub fn require<T>(cli: Option<T>, file: Option<T>, flag: &str) -> Result<T> {
    cli.or(file).ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

/// A boolean switch: asserted on the command line or in the file.
pub fn flag(cli: bool, file: Option<bool>) -> bool {
    cli || file.unwrap_or(false)
}

/// Comma-separated unsigned integers, as in `--source-classes 0,1,2`.
pub fn parse_index_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::Usage(format!("cannot parse `{s}` in list {raw:?}: {e}")))
        })
        .collect()
}
