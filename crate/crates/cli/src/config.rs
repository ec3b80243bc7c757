//! Run configuration files: hyperparameters for every training phase.

use std::path::Path;

use gridguard::env::{ActionGate, EnvConfig};
use gridguard::ppo::TrainConfig;
use gridguard::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Operator training from scratch (also used for black-box surrogates).
    pub agent: TrainConfig,
    pub adversary: TrainConfig,
    /// Fine-tuning against a fixed adversary.
    pub advtrain: TrainConfig,
    pub gate: ActionGate,
    pub env: EnvConfig,
    /// Validation and checkpoint period, in epochs.
    pub checkpoint_every: usize,
    /// Random states drawn to fit the observation normalizer.
    pub normalizer_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            agent: TrainConfig::default(),
            adversary: TrainConfig::default(),
            advtrain: TrainConfig::default(),
            gate: ActionGate::default(),
            env: EnvConfig::default(),
            checkpoint_every: 10,
            normalizer_samples: 2000,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.agent.validate()?;
        cfg.adversary.validate()?;
        cfg.advtrain.validate()?;
        Ok(cfg)
    }

    /// Points every phase at `seed`.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.agent.seed = seed;
        self.adversary.seed = seed;
        self.advtrain.seed = seed;
        self
    }
}
