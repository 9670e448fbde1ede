//! Versioned JSON checkpoints holding the full training state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::TrainState;

pub const CHECKPOINT_FORMAT: &str = "dcmgnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub relations: Vec<String>,
    pub target: String,
    pub chains: Vec<String>,
    pub state: TrainState,
}

fn chain_labels(model: &Model) -> Vec<String> {
    model.chains().iter().map(|c| c.label(model.schema())).collect()
}

impl Checkpoint {
    pub fn new(config: &RunConfig, model: &Model, state: &TrainState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            num_users: model.num_users(),
            num_items: model.num_items(),
            relations: model.schema().relations().to_vec(),
            target: model.schema().target_name().into(),
            chains: chain_labels(model),
            state: state.clone(),
        }
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let body = serde_json::to_vec(self)?;
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&body)
            .map_err(|e| Error::Checkpoint(format!("{}: unreadable checkpoint: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format {} v{} is not {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Human-readable differences against the model built from the current config.
    pub fn differences(&self, model: &Model) -> Vec<String> {
        let mut diff = Vec::new();
        let mut check = |what: &str, saved: String, current: String| {
            if saved != current {
                diff.push(format!("{what}: checkpoint {saved}, config {current}"));
            }
        };
        check("dim", self.config.dim.to_string(), model.config().dim.to_string());
        check("users", self.num_users.to_string(), model.num_users().to_string());
        check("items", self.num_items.to_string(), model.num_items().to_string());
        check(
            "nodes",
            (self.num_users + self.num_items).to_string(),
            model.num_nodes().to_string(),
        );
        check("relations", self.relations.join(","), model.schema().relations().join(","));
        check("target", self.target.clone(), model.schema().target_name().into());
        check("chains", self.chains.join(" "), chain_labels(model).join(" "));
        check(
            "separate-base",
            self.config.separate_base.to_string(),
            model.config().separate_base.to_string(),
        );
        diff
    }

    pub fn check_compatible(&self, model: &Model) -> Result<()> {
        let diff = self.differences(model);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint does not match the config:\n  {}", diff.join("\n  "))));
        }
        model
            .check_params(&self.state.params)
            .map_err(|e| Error::Checkpoint(format!("checkpoint parameters: {e}")))
    }
}
