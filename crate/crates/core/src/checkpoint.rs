//! Versioned JSON checkpoints: named parameter groups plus a config echo.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a reloaded checkpoint reproduces forward outputs bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Predictor};
use crate::nn::{ParamSet, TensorSpec};

pub const FORMAT: &str = "ecam-checkpoint";
pub const VERSION: u32 = 1;

/// Group holding the predictor parameters; the only one inference reads.
pub const MODEL_GROUP: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Free-form echo of the run configuration that produced the weights.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Resumable training state (epoch counters and the like).
    #[serde(default)]
    pub state: serde_json::Value,
    pub groups: BTreeMap<String, Vec<NamedTensor>>,
}

pub fn to_group(params: &ParamSet) -> Vec<NamedTensor> {
    params
        .specs
        .iter()
        .map(|s| NamedTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            values: params.values[s.range()].to_vec(),
        })
        .collect()
}

pub fn from_group(group: &[NamedTensor]) -> Result<ParamSet> {
    let mut specs = Vec::with_capacity(group.len());
    let mut values = Vec::new();
    for t in group {
        let spec = TensorSpec {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: values.len(),
        };
        if spec.numel() != t.values.len() {
            return Err(Error::Shape {
                expected: spec.numel(),
                actual: t.values.len(),
            });
        }
        values.extend_from_slice(&t.values);
        specs.push(spec);
    }
    Ok(ParamSet { specs, values })
}

impl Checkpoint {
    pub fn new(predictor: &Predictor) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(MODEL_GROUP.to_string(), to_group(&predictor.params));
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: predictor.cfg,
            config: serde_json::Value::Null,
            state: serde_json::Value::Null,
            groups,
        }
    }

    pub fn insert(&mut self, name: &str, params: &ParamSet) {
        self.groups.insert(name.to_string(), to_group(params));
    }

    pub fn group(&self, name: &str) -> Option<Result<ParamSet>> {
        self.groups.get(name).map(|g| from_group(g))
    }

    pub fn predictor(&self) -> Result<Predictor> {
        let params = self
            .group(MODEL_GROUP)
            .ok_or_else(|| Error::Validation("checkpoint has no model group".into()))??;
        Predictor::from_params(self.model, params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        if ck.format != FORMAT {
            return Err(Error::Validation(format!("{}: not a checkpoint", path.display())));
        }
        if ck.version != VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
