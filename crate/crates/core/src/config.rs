//! The run configuration: one TOML document describing model, training,
//! data and synthetic-data settings, with `a.b.c=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::MAX_STRIDE;
use crate::checkpoint::config_hash;
use crate::data::{Normalization, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train/`, `val/` and `test/`.
    pub root: PathBuf,
    /// Tile side for splitting large images; `0` keeps images whole.
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            patch_size: 256,
            normalization: Normalization::default(),
        }
    }
}

impl DataConfig {
    pub fn patch(&self) -> Option<usize> {
        (self.patch_size > 0).then_some(self.patch_size)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::ConfigParse(e.to_string().trim_end().replace('\n', " "))
}

impl RunConfig {
    /// Tiny encoder, 64x64 synthetic data, batch 8, 2000 iterations.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            data: DataConfig {
                root: PathBuf::from("data/synth"),
                patch_size: 0,
                normalization: Normalization::default(),
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::default()),
            _ => None,
        }
    }

    /// Checks every section, including the model's channel chain.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.data.normalization.validate()?;
        if self.data.patch_size % MAX_STRIDE != 0 {
            return Err(Error::config(
                "data.patch_size",
                format!("{} is not a multiple of {MAX_STRIDE}", self.data.patch_size),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| toml_error(e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| toml_error(e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.into() },
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| toml_error(e))
    }

    /// Identifies the model and training settings; a checkpoint may only
    /// resume under the same hash.
    pub fn hash(&self) -> Result<String> {
        config_hash(&(&self.model, &self.train))
    }
}

/// Sets `key.path=value` in a parsed document. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut node = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(parts[..=i].join("."), "is not a table")),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
