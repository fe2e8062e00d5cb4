//! TOML run configuration: `[model]`, `[train]`, `[loss]` and `[synth]`
//! sections mirroring the in-memory config structs, plus an optional
//! top-level `preset`. Unknown keys are rejected; missing keys keep the
//! value of the preset (or the built-in default).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::ModelConfig;
use crate::synthdata::SynthConfig;
use crate::training::{ExperimentConfig, LossWeights, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Parse(String),
}

/// Named starting points for the model section.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size model.
    #[default]
    Large,
    /// Reduced widths for CPU runs, see [`ModelConfig::desk`].
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "large" => Ok(Preset::Large),
            "desk" => Ok(Preset::Desk),
            _ => Err(ConfigError::Parse(format!("unknown preset {s:?} (expected large or desk)"))),
        }
    }

    pub fn config(self) -> RunConfig {
        match self {
            Preset::Large => RunConfig::default(),
            Preset::Desk => RunConfig { model: ModelConfig::desk(), ..RunConfig::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub synth: SynthConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Layers, lowest first: built-in defaults, the preset (`preset` wins
    /// over the file's own `preset` key, which wins over the default), the
    /// `seed` override for both `train.seed` and `synth.seed`, then the file.
    pub fn resolve(text: Option<&str>, preset: Option<Preset>, seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        let file_preset = match table.remove("preset") {
            None => None,
            Some(toml::Value::String(s)) => Some(Preset::parse(&s)?),
            Some(v) => return Err(ConfigError::Parse(format!("preset must be a string, got {v}"))),
        };
        let mut base = preset.or(file_preset).unwrap_or_default().config();
        if let Some(s) = seed {
            base.train.seed = s;
            base.synth.seed = s;
        }
        // Unknown keys must be rejected even though sections are merged key
        // by key, so the file is also parsed on its own.
        toml::Value::Table(table.clone()).try_into::<RunConfig>().map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, table);
        toml::Value::Table(merged).try_into().map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Parses `text` over the preset it names (or `fallback` when it names
    /// none).
    pub fn from_toml_with(text: &str, fallback: Preset) -> Result<Self, ConfigError> {
        let named = text.parse::<toml::Table>().ok().and_then(|t| t.get("preset").and_then(|v| v.as_str()).map(Preset::parse));
        match named {
            Some(p) => Self::resolve(Some(text), Some(p?), None),
            None => Self::resolve(Some(text), Some(fallback), None),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, Preset::Large)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self, ConfigError> {
        Self::from_toml_with(&std::fs::read_to_string(path)?, fallback)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig { model: self.model.clone(), train: self.train.clone(), loss: self.loss }
    }
}
