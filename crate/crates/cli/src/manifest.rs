//! Run manifests: what ran, with which resolved settings, and the SHA-256 of
//! every file it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: BTreeMap<String, String>,
    pub master_seed: u64,
    pub artifacts: Vec<Artifact>,
    pub tool_version: String,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Stable identity of a resolved configuration.
pub fn config_key(config: &BTreeMap<String, String>) -> String {
    let canon: String = config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    sha256_bytes(canon.as_bytes())[..16].to_string()
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &BTreeMap<String, String>, master_seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            master_seed,
            artifacts: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn add(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.artifacts.push(Artifact {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// True when every listed artifact still exists with the recorded hash.
    pub fn artifacts_intact(&self) -> bool {
        self.artifacts
            .iter()
            .all(|a| sha256_file(&a.path).is_ok_and(|h| h == a.sha256))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "config_path": self.config_path.as_ref().map(|p| p.display().to_string()),
            "config": self.config,
            "master_seed": self.master_seed,
            "artifacts": self.artifacts.iter().map(|a| json!({
                "path": a.path.display().to_string(),
                "sha256": a.sha256,
            })).collect::<Vec<_>>(),
            "tool_version": self.tool_version,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = || anyhow!("malformed manifest");
        let config = v["config"]
            .as_object()
            .ok_or_else(bad)?
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_str().ok_or_else(bad)?.to_string())))
            .collect::<Result<_>>()?;
        let artifacts = v["artifacts"]
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|a| {
                Ok(Artifact {
                    path: PathBuf::from(a["path"].as_str().ok_or_else(bad)?),
                    sha256: a["sha256"].as_str().ok_or_else(bad)?.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            command: v["command"].as_str().ok_or_else(bad)?.to_string(),
            config_path: v["config_path"].as_str().map(PathBuf::from),
            config,
            master_seed: v["master_seed"].as_u64().ok_or_else(bad)?,
            artifacts,
            tool_version: v["tool_version"].as_str().ok_or_else(bad)?.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())? + "\n";
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
        Self::from_json(&v).with_context(|| format!("{}", path.display()))
    }
}
