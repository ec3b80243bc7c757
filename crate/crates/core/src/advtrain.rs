//! Fine-tuning a pretrained operator in a grid perturbed by a fixed attacker.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{run_episode, Adversary, AttackSchedule};
use crate::agent::{Agent, OperatorEnv};
use crate::checkpoint::Checkpoint;
use crate::env::{ActionGate, Env, Normalizer};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::policy::Policy;
use crate::ppo::{derive_seed, init_policy, train_policy_with, EpochStats, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvTrainConfig {
    pub pretrain_epochs: usize,
    pub advtrain_epochs: usize,
    pub train: TrainConfig,
    /// Validation and checkpointing period, in epochs.
    pub checkpoint_every: usize,
    pub gate: ActionGate,
    pub schedule: AttackSchedule,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            pretrain_epochs: 100,
            advtrain_epochs: 100,
            train: TrainConfig::default(),
            checkpoint_every: 10,
            gate: ActionGate::default(),
            schedule: AttackSchedule::default(),
        }
    }
}

/// Held-out scenarios used to pick the kept checkpoint.
#[derive(Clone, Debug)]
pub struct Validation {
    pub envs: Vec<Env>,
    /// Scored alongside clean play when not `Adversary::None`.
    pub adversary: Adversary,
    pub seed: u64,
}

impl Validation {
    /// Mean episode reward of the greedy policy, averaged over clean play and
    /// (when configured) play under the validation attacker.
    pub fn score(&self, policy: &Policy, gate: ActionGate, schedule: &AttackSchedule) -> Result<f64> {
        let agent = Agent::learned(policy.clone(), gate);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, env) in self.envs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[i as u64]));
            total += run_episode(env, &agent, &Adversary::None, schedule, &mut rng)?.reward;
            count += 1;
            if !matches!(self.adversary, Adversary::None) {
                total += run_episode(env, &agent, &self.adversary, schedule, &mut rng)?.reward;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_policy: Policy,
    /// Best checkpoint by validation score (the final policy when there is no
    /// validation set).
    pub best: Policy,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<EpochStats>,
}

/// Where periodic checkpoints go and what to stamp them with.
#[derive(Clone, Debug)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub grid: &'a GridSpec,
    pub prefix: &'a str,
}

impl CheckpointSink<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}_{name}.json", self.prefix))
    }

    fn save(&self, name: &str, policy: &Policy, gate: ActionGate, cfg: &TrainConfig, epochs: usize) -> Result<()> {
        Checkpoint::agent(self.grid, policy.clone(), gate, cfg.clone(), epochs).save(&self.path(name))
    }
}

/// Trains an operator in `envs` (optionally under a fixed attacker), scoring
/// every `checkpoint_every` epochs on the validation set and keeping the best.
/// The starting policy counts as epoch 0.
#[allow(clippy::too_many_arguments)]
pub fn train_agent_selected(
    envs: Vec<Env>,
    initial: Policy,
    adversary: Adversary,
    cfg: &TrainConfig,
    gate: ActionGate,
    schedule: AttackSchedule,
    checkpoint_every: usize,
    validation: Option<&Validation>,
    sink: Option<&CheckpointSink<'_>>,
) -> Result<TrainOutcome> {
    let op_env = OperatorEnv::new(envs, adversary, schedule, gate)?;
    let every = checkpoint_every.max(1);
    let mut best = initial.clone();
    let mut best_epoch = 0;
    let mut best_score = match validation {
        Some(v) => Some(v.score(&initial, gate, &schedule)?),
        None => None,
    };
    let mut last_good = initial.clone();
    let mut last_good_epoch = 0;
    let result = train_policy_with(&op_env, initial, cfg, |stats, policy| {
        let done = stats.epoch + 1;
        last_good = policy.clone();
        last_good_epoch = done;
        if done % every == 0 || done == cfg.epochs {
            if let Some(sink) = sink {
                sink.save(&format!("epoch{done:04}"), policy, gate, cfg, done)?;
            }
            if let Some(v) = validation {
                let score = v.score(policy, gate, &schedule)?;
                if best_score.is_none_or(|b| score > b) {
                    best_score = Some(score);
                    best = policy.clone();
                    best_epoch = done;
                }
            }
        }
        Ok(())
    });
    let (final_policy, history) = match result {
        Ok(r) => r,
        Err(e @ Error::Divergence { .. }) => {
            if let Some(sink) = sink {
                sink.save("last_good", &last_good, gate, cfg, last_good_epoch)?;
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if validation.is_none() {
        best = final_policy.clone();
        best_epoch = cfg.epochs;
    }
    if let Some(sink) = sink {
        sink.save("best", &best, gate, cfg, best_epoch)?;
    }
    Ok(TrainOutcome {
        final_policy,
        best,
        best_epoch,
        best_score,
        history,
    })
}

/// Plain operator training from random initialization.
pub fn train_agent(
    envs: Vec<Env>,
    normalizer: Normalizer,
    cfg: &TrainConfig,
    gate: ActionGate,
    validation: Option<&Validation>,
) -> Result<TrainOutcome> {
    let op_env = OperatorEnv::new(envs.clone(), Adversary::None, AttackSchedule::default(), gate)?;
    let initial = init_policy(&op_env, normalizer, cfg)?;
    train_agent_selected(envs, initial, Adversary::None, cfg, gate, AttackSchedule::default(), 10, validation, None)
}

/// Fine-tunes `pretrained` for `cfg.advtrain_epochs` epochs against the fixed
/// `adversary`. The adversary is only ever read.
pub fn adversarial_train(
    envs: Vec<Env>,
    pretrained: Policy,
    adversary: Adversary,
    cfg: &AdvTrainConfig,
    validation: Option<&Validation>,
    sink: Option<&CheckpointSink<'_>>,
) -> Result<TrainOutcome> {
    let train = TrainConfig {
        epochs: cfg.advtrain_epochs,
        ..cfg.train.clone()
    };
    train_agent_selected(
        envs,
        pretrained,
        adversary,
        &train,
        cfg.gate,
        cfg.schedule,
        cfg.checkpoint_every,
        validation,
        sink,
    )
}

/// Pretrains without attacks for `cfg.pretrain_epochs`, then fine-tunes
/// against `adversary`. Returns the outcomes of both phases.
pub fn pretrain_then_advtrain(
    envs: Vec<Env>,
    normalizer: Normalizer,
    adversary: Adversary,
    cfg: &AdvTrainConfig,
    validation: Option<&Validation>,
    sink: Option<&CheckpointSink<'_>>,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let pre_cfg = TrainConfig {
        epochs: cfg.pretrain_epochs,
        ..cfg.train.clone()
    };
    let op_env = OperatorEnv::new(envs.clone(), Adversary::None, cfg.schedule, cfg.gate)?;
    let initial = init_policy(&op_env, normalizer, &pre_cfg)?;
    let clean_validation = validation.map(|v| Validation {
        adversary: Adversary::None,
        ..v.clone()
    });
    let pre_sink = sink.map(|s| CheckpointSink { prefix: "pretrain", ..s.clone() });
    let pre = train_agent_selected(
        envs.clone(),
        initial,
        Adversary::None,
        &pre_cfg,
        cfg.gate,
        cfg.schedule,
        cfg.checkpoint_every,
        clean_validation.as_ref(),
        pre_sink.as_ref(),
    )?;
    let adv_sink = sink.map(|s| CheckpointSink { prefix: "advtrain", ..s.clone() });
    let adv = adversarial_train(envs, pre.best.clone(), adversary, cfg, validation, adv_sink.as_ref())?;
    Ok((pre, adv))
}
