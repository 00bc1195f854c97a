//! Plain `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then the config
//! file, then command-line flags. Every key a command reads ends up in the
//! resolved snapshot, which is persisted in the run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
    pub source: Option<PathBuf>,
}

impl Settings {
    /// Reads `path` if given. Keys outside `known` are rejected.
    pub fn load(path: Option<&Path>, known: &[&str]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            s.values = parse(&text).with_context(|| format!("config {}", p.display()))?;
            for k in s.values.keys() {
                if !known.contains(&k.as_str()) {
                    bail!("config {}: unknown key `{k}` (known: {})", p.display(), known.join(", "));
                }
            }
            s.source = Some(p.to_path_buf());
        }
        Ok(s)
    }

    /// Flag overrides; `None` leaves the file value in place.
    pub fn apply(&mut self, flags: &[(&str, &Option<String>)]) {
        for (k, v) in flags {
            if let Some(v) = v {
                self.values.insert((*k).to_string(), v.clone());
            }
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed value of `key`, or `default` when unset.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match self.values.get(key) {
            Some(raw) => parse_value(key, raw)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Settings::get`] but the key has no default.
    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let Some(raw) = self.values.get(key) else {
            bail!("config key `{key}` is required (set it in the config file or with --{})", key.replace('_', "-"));
        };
        let v: T = parse_value(key, raw)?;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Comma-separated list, or `default` when unset.
    pub fn list<T>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match self.values.get(key) {
            Some(raw) => raw
                .split(',')
                .map(|s| parse_value(key, s))
                .collect::<Result<Vec<_>>>()?,
            None => default,
        };
        if v.is_empty() {
            bail!("config key `{key}` must list at least one value");
        }
        let joined = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        self.resolved.insert(key.to_string(), joined);
        Ok(v)
    }

    /// Every key read so far with its final value.
    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

fn parse_value<T>(key: &str, raw: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    raw.trim()
        .parse::<T>()
        .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse {raw:?}: {e}"))
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {line:?}", n + 1);
        };
        let k = k.trim();
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            bail!("line {}: duplicate key `{k}`", n + 1);
        }
    }
    Ok(out)
}

/// Fails with the key name and the legal range when `ok` is false.
pub fn ensure_range(ok: bool, key: &str, legal: &str, got: impl Display) -> Result<()> {
    if !ok {
        bail!("config key `{key}` must be {legal} (got {got})");
    }
    Ok(())
}
