use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flowcore::TimeSamplingConfig;
use crate::net::{Activation, AdamConfig, NetworkArch};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let base = NetworkArch::mlp(1, 1, vec![128, 128, 128]);
        Self {
            hidden: base.hidden,
            activation: base.activation,
            time_embed_dim: base.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.adam.lr,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.adam.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub time_sampling: TimeSamplingConfig,
    pub optimizer: OptimizerConfig,
    /// Zero is allowed and yields the initialization.
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Held-out points per validation mode.
    pub eval_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default_gmm(),
            model: ModelConfig::default(),
            time_sampling: TimeSamplingConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 20_000,
            batch_size: 256,
            eval_every: 500,
            eval_size: 1024,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn arch(&self) -> NetworkArch {
        NetworkArch {
            input_dim: self.task.dim(),
            cond_dim: self.task.cond_dim(),
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            time_embed_dim: self.model.time_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.arch().validate()?;
        self.time_sampling.validate()?;
        let a = &self.optimizer.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_size", self.eval_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
