//! Experiment configuration: TOML sections plus `FEDSTIL_<SECTION>_<KEY>`
//! environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::client::TrainConfig;
use crate::error::{Error, Result};
use crate::model::LayerShapes;
use crate::server::ServerConfig;
use crate::stream::StreamConfig;

pub const ENV_PREFIX: &str = "FEDSTIL_";

const SECTIONS: [&str; 6] = ["stream", "model", "training", "server", "memory", "run"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub proto_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            proto_dim: 64,
            hidden_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub budget: usize,
    pub per_identity_quota: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            budget: 512,
            per_identity_quota: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Seeds model initialization, the extractor and training draws.
    pub seed: u64,
    /// Evaluate every `eval_stride` rounds; the final round is always evaluated.
    pub eval_stride: usize,
    /// Replace the synthetic stream with a precomputed embedding file.
    pub embedding_file: Option<PathBuf>,
    /// Write a resumable state snapshot after every round.
    pub checkpoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: Strategy::Fedstil,
            seed: 0,
            eval_stride: 1,
            embedding_file: None,
            checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub server: ServerConfig,
    pub memory: MemoryConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run.embedding_file.is_none() {
            self.stream.validate()?;
        }
        if self.stream.num_clients < 2 {
            return Err(Error::Config(
                "stream.num_clients must be at least 2 (galleries come from other clients)".into(),
            ));
        }
        if self.model.proto_dim == 0 || self.model.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.memory.budget == 0 {
            return Err(Error::Config("memory.budget must be positive".into()));
        }
        if self.run.eval_stride == 0 {
            return Err(Error::Config("run.eval_stride must be positive".into()));
        }
        self.training.validate()?;
        self.server.validate()
    }

    pub fn shapes(&self, num_labels: usize) -> Result<LayerShapes> {
        LayerShapes::new(self.model.proto_dim, self.model.hidden_dim, num_labels)
    }

    /// Sets both the experiment seed and the stream seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.stream.seed = seed;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: &Path,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_env_overrides(&mut table, vars)?;
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }
}

/// Folds `FEDSTIL_<SECTION>_<KEY>=value` variables into `table`. Values
/// are read as TOML literals when they parse as one, else as strings.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut overrides: Vec<(String, String, String)> = Vec::new();
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let (section, key) = rest
            .split_once('_')
            .filter(|(s, k)| SECTIONS.contains(s) && !k.is_empty())
            .ok_or_else(|| Error::Config(format!("unrecognized override {name}")))?;
        overrides.push((section.to_string(), key.to_string(), value));
    }
    // Environment order is unspecified; apply in a fixed order.
    overrides.sort();
    for (section, key, value) in overrides {
        let literal = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(value));
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(inner) = entry else {
            return Err(Error::Config(format!("[{section}] is not a table")));
        };
        inner.insert(key, literal);
    }
    Ok(())
}
