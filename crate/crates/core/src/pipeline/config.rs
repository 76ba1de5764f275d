//! TOML configuration for the command-line tools, with `section.key=value`
//! overrides.
//!
//! ```toml
//! [data]
//! triples = "data/kb.tsv"
//! catalog = "data/catalog.tsv"
//!
//! [experiment]
//! mode = "full"
//!
//! [experiment.train]
//! epochs = 40
//! lr = 1e-3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::CorpusConfig;
use super::experiment::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub triples: PathBuf,
    pub catalog: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            triples: "data/kb.tsv".into(),
            catalog: "data/catalog.tsv".into(),
            train: "data/train.jsonl".into(),
            test: "data/test.jsonl".into(),
            checkpoint: "runs/model.json".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataPaths,
    pub corpus: CorpusConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, then the file if given, then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    /// Sets one existing key, e.g. `experiment.train.epochs=10`. The value
    /// is read as a TOML literal, or as a bare string if that fails.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown setting {path:?}")))?;
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        *slot = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }
}
