use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::net::{NetworkArch, NetworkParams};

pub const CHECKPOINT_FORMAT: &str = "hybridflow-checkpoint/1";

/// Serialized network with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub arch: NetworkArch,
    /// Row-major weights then bias, layer by layer.
    pub params: Vec<f64>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(params: &NetworkParams, config: &ExperimentConfig, step: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            arch: params.arch.clone(),
            params: params.flat(),
            config: config.clone(),
            seed: config.seed,
            step,
        }
    }

    pub fn network(&self) -> Result<NetworkParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format '{}'", self.format)));
        }
        if self.arch != self.config.arch() {
            return Err(Error::Arch("checkpoint arch disagrees with its config".into()));
        }
        let mut p = NetworkParams::zeros(&self.arch)?;
        p.set_flat(&self.params)?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        ck.network()?;
        Ok(ck)
    }
}
