//! Experiment configuration: one JSON document, every field defaulted,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{EncoderConfig, HeadConfig};
use crate::objectives::{RegConfig, SimilarityConfig};
use crate::spirograph::{RenderGrid, SpiroSpecs};
use crate::train::{TrainConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing dataset file; generated from the fields below when absent.
    pub path: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub resolution: usize,
    pub extent: f64,
    pub specs: SpiroSpecs,
}

impl Default for DataConfig {
    fn default() -> Self {
        let grid = RenderGrid::default();
        DataConfig {
            path: None,
            n_train: 10_000,
            n_test: 2_000,
            resolution: grid.resolution,
            extent: grid.extent,
            specs: SpiroSpecs::default(),
        }
    }
}

impl DataConfig {
    pub fn grid(&self) -> Result<RenderGrid> {
        RenderGrid::new(self.resolution, self.extent).map_err(|e| Error::Config {
            key: "data.resolution".into(),
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.specs.validate().map_err(|e| Error::Config {
            key: "data.specs".into(),
            detail: e.to_string(),
        })?;
        for (key, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n < 2 {
                return Err(Error::Config {
                    key: format!("data.{key}"),
                    detail: format!("must be at least 2, got {n}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub reg: RegConfig,
    pub similarity: SimilarityConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        ExperimentConfig {
            seed: 0,
            encoder: EncoderConfig {
                input_shape: [3, data.resolution, data.resolution],
                ..EncoderConfig::default()
            },
            data,
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            reg: RegConfig::default(),
            similarity: SimilarityConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.eval.validate()?;
        self.setup().validate()?;
        let want = [3, self.data.resolution, self.data.resolution];
        if self.encoder.input_shape != want {
            return Err(Error::Config {
                key: "encoder.input_shape".into(),
                detail: format!("{:?} does not match rendered images {want:?}", self.encoder.input_shape),
            });
        }
        if self.data.n_train < self.train.batch_size {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                detail: format!("{} exceeds data.n_train {}", self.train.batch_size, self.data.n_train),
            });
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            train: self.train.clone(),
            reg: self.reg,
            similarity: self.similarity,
            seed: self.seed,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Parses and validates a config document, with `overrides` applied
    /// first. `origin` names the source in error messages.
    pub fn from_value(mut doc: Value, overrides: &[(String, Value)], origin: &str) -> Result<Self> {
        if doc.is_null() {
            doc = Value::Object(Default::default());
        }
        for (key, v) in overrides {
            set_path(&mut doc, key, v.clone())?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let key = e.path().to_string();
            Error::Config {
                key,
                detail: format!("{origin}: {}", e.into_inner()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let doc = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config {
                key: ".".into(),
                detail: format!("<string>: {e}"),
            })?
        };
        Self::from_value(doc, overrides, "<string>")
    }
}

/// Reads a config file; an empty file gives the defaults.
pub fn load_config(path: &Path, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let doc = if text.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config {
            key: ".".into(),
            detail: format!("{origin}: {e}"),
        })?
    };
    ExperimentConfig::from_value(doc, overrides, &origin)
}

/// Splits `key=value`; the value is read as JSON when it parses, else as a
/// string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {s:?} is not key=value")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

fn set_path(doc: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config {
                key: key.into(),
                detail: "empty path segment".into(),
            });
        }
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config {
            key: parts[..i].join("."),
            detail: "not an object".into(),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
