//! Experiment configuration: a TOML file with one table per concern.
//!
//! ```toml
//! [data]
//! train = "adult.data"
//! test = "adult.test"
//!
//! [federation]
//! rounds = 50
//! ```
//!
//! Every omitted key takes its default, and [`ExperimentConfig::materialize`]
//! writes the chosen values back so a serialized config is complete.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synthetic_schema, DataSchema, SynthConfig};
use crate::dp::PrivacyConfig;
use crate::error::{Error, Result};
use crate::fed::{FederationConfig, RunConfig};
use crate::trainer::FairnessConfig;

/// A named built-in schema or an inline one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSpec {
    Preset(String),
    Inline(DataSchema),
}

impl SchemaSpec {
    pub fn resolve(&self) -> Result<DataSchema> {
        let schema = match self {
            SchemaSpec::Preset(name) => match name.as_str() {
                "adult" => DataSchema::adult(),
                "synthetic" => synthetic_schema(),
                other => {
                    return Err(Error::config(
                        "data.schema",
                        format!("unknown preset {other:?}; expected \"adult\", \"synthetic\" or a table"),
                    ))
                }
            },
            SchemaSpec::Inline(s) => s.clone(),
        };
        schema
            .validate()
            .map_err(|e| Error::config("data.schema", e.to_string()))?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Without it each client holds out `federation.test_fraction` of its shard.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Generate the training rows instead of reading `train`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
    /// Defaults to `"synthetic"` for generated data and `"adult"` otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<SchemaSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100, 100],
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write `trace_client_{i}.csv` with the fairness-stage step records.
    pub traces: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, traces: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub fairness: FairnessConfig,
    pub privacy: PrivacyConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses and materializes without touching the filesystem.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.materialize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Fills in values whose default depends on other fields.
    pub fn materialize(&mut self) {
        if self.data.schema.is_none() {
            let preset = if self.data.synthetic.is_some() { "synthetic" } else { "adult" };
            self.data.schema = Some(SchemaSpec::Preset(preset.into()));
        }
        if self.privacy.epsilon.is_none() && self.privacy.noise_multiplier.is_none() {
            self.privacy.epsilon = PrivacyConfig::default().epsilon;
        }
    }

    /// Invariants that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.train, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("data.synthetic", "give either data.train or data.synthetic")),
            (None, None) => return Err(Error::config("data.train", "a training file or data.synthetic is required")),
            (None, Some(s)) => s.validate().map_err(|e| Error::config("data.synthetic", e.to_string()))?,
            _ => {}
        }
        self.schema()?;
        self.privacy.validate()?;
        self.run_config().validate()
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for (field, path) in [("data.train", &self.data.train), ("data.test", &self.data.test)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<DataSchema> {
        match &self.data.schema {
            Some(s) => s.resolve(),
            None => Err(Error::config("data.schema", "not materialized")),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            federation: self.federation,
            fairness: self.fairness,
            privacy: self.privacy,
            hidden: self.model.hidden.clone(),
            lr: self.training.lr,
            batch_size: self.training.batch_size,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.train, &mut self.data.test, &mut self.output.dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Reads, materializes and validates a config file. Relative paths are taken
/// relative to the file's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(base) = path.parent() {
        cfg.resolve_paths(base);
    }
    cfg.check_files()?;
    Ok(cfg)
}
