//! JSON checkpoints: configuration, normalisation statistics, every
//! parameter under its path, optimiser moments and step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pir::NormStats;
use crate::train::{AdamState, RunConfig, Trainer};

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u64,
    pub config: RunConfig,
    pub norm: NormStats,
    pub params: Vec<ParamRecord>,
    pub optimizer: AdamState,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let params = t
            .model
            .store
            .iter()
            .map(|(_, name, v)| ParamRecord { name: name.to_string(), shape: v.shape().to_vec(), data: v.data().to_vec() })
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            config: t.config.clone(),
            norm: t.norm.clone(),
            params,
            optimizer: t.optim.clone(),
            step: t.optim.step,
        }
    }

    /// Rebuilds the model from the stored configuration and overwrites every
    /// parameter; the parameter sets must agree exactly.
    pub fn into_trainer(self) -> Result<Trainer> {
        self.config.validate()?;
        self.norm.validate()?;
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, configuration builds {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in self.params {
            model.store.assign(&p.name, &p.shape, p.data)?;
        }
        let sizes: Vec<usize> = model.store.iter().map(|(_, _, v)| v.len()).collect();
        let moments_fit = |m: &[Vec<f64>]| m.len() == sizes.len() && m.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !moments_fit(&self.optimizer.m) || !moments_fit(&self.optimizer.v) || self.optimizer.step != self.step {
            return Err(Error::Validation("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer { config: self.config, model, norm: self.norm, optim: self.optimizer })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion { found, expected: CHECKPOINT_VERSION });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
