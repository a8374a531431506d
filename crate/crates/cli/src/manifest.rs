//! Run configuration files and the manifest written into every run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pstp_core::config::parse_toml;
use pstp_core::{Error, ModelConfig, Result, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything a command can be configured with. Sections a command does not
/// use are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = parse_toml(&text, &path.display().to_string())?;
        cfg.model.validate()?;
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        if let Some(s) = &cfg.synth {
            s.validate()?;
        }
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<&SynthSpec> {
        self.synth.as_ref().ok_or_else(|| Error::Config("config has no [synth] section".into()))
    }

    pub fn train_or_default(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Named inputs such as the data directory or sweep values.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, relative to its directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn input(&self, key: &str) -> Result<&str> {
        self.inputs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("manifest has no input {key:?}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
