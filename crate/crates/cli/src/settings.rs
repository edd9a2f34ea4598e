//! Run configuration files: TOML with optional `data`, `out`, `[train]`,
//! `[generate]` and `[splits]` sections. Values layer as defaults (or a
//! checkpoint's stored config), then the file, then command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use omnifuse_core::dataspec::SyntheticConfig;
use omnifuse_core::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub generate: toml::Table,
    pub splits: Option<BTreeMap<String, f64>>,
}

#[derive(Serialize)]
struct Defaults {
    train: TrainConfig,
    generate: SyntheticConfig,
    splits: BTreeMap<String, f64>,
}

pub fn default_splits() -> BTreeMap<String, f64> {
    [("train".to_string(), 0.7), ("val".to_string(), 0.1), ("test".to_string(), 0.2)].into()
}

pub fn dump_defaults() -> Result<String, CliError> {
    let d = Defaults { train: TrainConfig::default(), generate: SyntheticConfig::default(), splits: default_splits() };
    toml::to_string(&d).map_err(|e| CliError::Config(e.to_string()))
}

pub fn read_file(path: Option<&Path>) -> Result<RunFile, CliError> {
    let Some(path) = path else {
        return Ok(RunFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// `base` with every key of `overlay` replaced; unknown keys are errors.
pub fn layer<T: Serialize + DeserializeOwned>(base: &T, overlay: &toml::Table, section: &str) -> Result<T, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("[{section}]: {e}"));
    let mut table = toml::Table::try_from(base).map_err(|e| bad(&e))?;
    for (k, v) in overlay {
        table.insert(k.clone(), v.clone());
    }
    table.try_into().map_err(|e| bad(&e))
}

pub fn effective_toml(cfg: &TrainConfig) -> Result<String, CliError> {
    #[derive(Serialize)]
    struct Effective<'a> {
        train: &'a TrainConfig,
    }
    toml::to_string(&Effective { train: cfg }).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = dump_defaults().unwrap();
        let f: RunFile = toml::from_str(&text).unwrap();
        let cfg: TrainConfig = layer(&TrainConfig::default(), &f.train, "train").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let g: SyntheticConfig = layer(&SyntheticConfig::default(), &f.generate, "generate").unwrap();
        assert_eq!(g, SyntheticConfig::default());
    }

    #[test]
    fn overlay_replaces_and_rejects_unknown_keys() {
        let f: RunFile = toml::from_str("[train]\nd = 32\nheads = 4\n").unwrap();
        let cfg: TrainConfig = layer(&TrainConfig::default(), &f.train, "train").unwrap();
        assert_eq!((cfg.d, cfg.heads, cfg.blocks), (32, 4, 6));
        let f: RunFile = toml::from_str("[train]\nwidth = 3\n").unwrap();
        assert!(layer(&TrainConfig::default(), &f.train, "train").is_err());
        assert!(toml::from_str::<RunFile>("colour = 1\n").is_err());
    }
}
