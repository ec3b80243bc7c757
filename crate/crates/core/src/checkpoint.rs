//! JSON model files: weights, observation normalization and training settings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::AttackSchedule;
use crate::env::{observation_len, ActionGate, ActionSpace};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::policy::Policy;
use crate::ppo::{EpochStats, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Agent,
    Adversary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub grid: String,
    pub obs_len: usize,
    pub n_actions: usize,
    pub policy: Policy,
    /// Operator action gate (agents only).
    pub gate: ActionGate,
    /// Lines the model may cut (adversaries only).
    pub attackable_lines: Vec<usize>,
    pub schedule: AttackSchedule,
    pub config: TrainConfig,
    pub epochs_trained: usize,
}

impl Checkpoint {
    pub fn agent(grid: &GridSpec, policy: Policy, gate: ActionGate, config: TrainConfig, epochs: usize) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Agent,
            grid: grid.name.clone(),
            obs_len: policy.params.obs_len(),
            n_actions: policy.params.action_count(),
            policy,
            gate,
            attackable_lines: Vec::new(),
            schedule: AttackSchedule::default(),
            config,
            epochs_trained: epochs,
        }
    }

    pub fn adversary(
        grid: &GridSpec,
        policy: Policy,
        lines: Vec<usize>,
        schedule: AttackSchedule,
        config: TrainConfig,
        epochs: usize,
    ) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Adversary,
            grid: grid.name.clone(),
            obs_len: policy.params.obs_len(),
            n_actions: policy.params.action_count(),
            policy,
            gate: ActionGate::default(),
            attackable_lines: lines,
            schedule,
            config,
            epochs_trained: epochs,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::parse(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                path,
                format!("format version {} is not supported (expected {FORMAT_VERSION})", ck.format_version),
            ));
        }
        Ok(ck)
    }

    /// Checks shapes and names against the grid this model is about to run on.
    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        let mut problems = Vec::new();
        if self.grid != grid.name {
            problems.push(format!("trained on grid {:?}, running on {:?}", self.grid, grid.name));
        }
        let obs = observation_len(grid);
        if self.obs_len != obs || self.policy.params.obs_len() != obs {
            problems.push(format!("observation length {} but grid gives {obs}", self.obs_len));
        }
        let actions = match self.kind {
            ModelKind::Agent => ActionSpace::new(grid).len(),
            ModelKind::Adversary => 1 + self.attackable_lines.len(),
        };
        if self.n_actions != actions || self.policy.params.action_count() != actions {
            problems.push(format!("{} actions but grid gives {actions}", self.n_actions));
        }
        if let Some(l) = self.attackable_lines.iter().find(|&&l| l >= grid.n_lines()) {
            problems.push(format!("attackable line {l} does not exist"));
        }
        if !self.policy.params.is_finite() {
            problems.push("non-finite weights".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems.join("; ")))
        }
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(format!("expected {kind:?} model, found {:?}", self.kind)))
        }
    }
}

/// `epoch,mean_reward,mean_steps,blackout_rate`, one row per epoch.
pub fn training_curve_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_reward,mean_steps,blackout_rate\n");
    for s in history {
        writeln!(
            out,
            "{},{:.6},{:.3},{:.4}",
            s.epoch, s.mean_reward, s.mean_steps, s.blackout_rate
        )
        .unwrap();
    }
    out
}

pub fn write_training_curve(path: &Path, history: &[EpochStats]) -> Result<()> {
    std::fs::write(path, training_curve_csv(history)).map_err(|e| Error::io(path, e))
}
