//! Proximal policy optimization: rollouts, GAE, the clipped surrogate and its
//! gradient, momentum SGD, and the epoch loop shared by agents and adversaries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Normalizer;
use crate::error::{Error, Result};
use crate::nn::{Mlp, PolicyParams};
use crate::policy::{masked_log_softmax, sample_action, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Longest stretch collected from one episode before bootstrapping.
    pub rollout_length: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Interval the probability ratio is clipped to.
    pub clip_range: (f64, f64),
    pub gae_lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Passes over each epoch's data.
    pub update_epochs: usize,
    pub momentum: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub hidden: Vec<usize>,
    pub episodes_per_epoch: usize,
    /// Multiplier applied to rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            rollout_length: 864,
            gamma: 0.99,
            learning_rate: 1e-4,
            clip_range: (0.98, 1.02),
            gae_lambda: 0.95,
            epochs: 100,
            seed: 0,
            update_epochs: 4,
            momentum: 0.9,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: Some(0.5),
            hidden: vec![128, 128, 128],
            episodes_per_epoch: 10,
            reward_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            problems.push(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            problems.push(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        let (lo, hi) = self.clip_range;
        if !(lo <= 1.0 && 1.0 <= hi && lo > 0.0) {
            problems.push(format!("clip range [{lo}, {hi}] does not bracket 1"));
        }
        if self.batch_size == 0 || self.episodes_per_epoch == 0 || self.rollout_length == 0 {
            problems.push("batch_size, episodes_per_epoch and rollout_length must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning rate {} must be positive", self.learning_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Result of one environment transition as seen by the learner.
#[derive(Clone, Debug)]
pub struct Transition<S> {
    pub state: S,
    pub reward: f64,
    pub done: bool,
    pub blackout: bool,
}

/// Anything PPO can be trained on: the operator's MDP or the adversary's.
pub trait Environment: Sync {
    type State: Clone + Send;

    fn obs_len(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Number of distinct episode starts (scenarios).
    fn n_episodes(&self) -> usize;
    fn reset(&self, episode: usize) -> Result<Self::State>;
    fn observe(&self, state: &Self::State) -> Vec<f64>;
    fn mask(&self, state: &Self::State) -> Vec<bool>;
    fn step(&self, state: &Self::State, action: usize, rng: &mut ChaCha8Rng) -> Result<Transition<Self::State>>;
}

/// Mixes a base seed with stream tags (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// One collected episode (possibly truncated).
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    /// Normalized observations.
    pub obs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state after the last transition; 0 when it was terminal.
    pub bootstrap: f64,
    pub blackout: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs `policy` (sampling) for one episode.
pub fn collect_episode<E: Environment>(
    env: &E,
    policy: &Policy,
    episode: usize,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut state = env.reset(episode)?;
    let mut traj = Trajectory::default();
    loop {
        let obs = policy.normalizer.apply(&env.observe(&state));
        let mask = env.mask(&state);
        let (logits, value) = policy.params.forward(&obs)?;
        let (action, logp) = sample_action(&logits, &mask, rng)?;
        let tr = env.step(&state, action, rng)?;
        traj.obs.push(obs);
        traj.masks.push(mask);
        traj.actions.push(action);
        traj.log_probs.push(logp);
        traj.values.push(value);
        traj.rewards.push(tr.reward);
        traj.dones.push(tr.done);
        traj.blackout |= tr.blackout;
        state = tr.state;
        if tr.done {
            traj.bootstrap = 0.0;
            return Ok(traj);
        }
        if traj.len() >= max_steps {
            let obs = policy.normalizer.apply(&env.observe(&state));
            traj.bootstrap = policy.params.forward(&obs)?.1;
            return Ok(traj);
        }
    }
}

/// Generalized advantage estimation. Returns raw advantages and value targets.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// Flattened training samples.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_trajectories(trajs: &[Trajectory], cfg: &TrainConfig) -> Batch {
        let mut batch = Batch::default();
        for tr in trajs {
            let scaled: Vec<f64> = tr.rewards.iter().map(|r| r * cfg.reward_scale).collect();
            let (adv, ret) = gae(&scaled, &tr.values, &tr.dones, tr.bootstrap, cfg.gamma, cfg.gae_lambda);
            batch.obs.extend(tr.obs.iter().cloned());
            batch.masks.extend(tr.masks.iter().cloned());
            batch.actions.extend(&tr.actions);
            batch.old_log_probs.extend(&tr.log_probs);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }
        normalize_advantages(&mut batch.advantages);
        batch
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            obs: idx.iter().map(|&i| self.obs[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Per-sample pieces of the loss. `grad_logits` and `grad_value` are the
/// derivatives of this sample's (unaveraged) loss.
struct SampleTerms {
    policy: f64,
    value: f64,
    entropy: f64,
    kl: f64,
    clipped: bool,
    grad_logits: Vec<f64>,
    grad_value: f64,
}

fn sample_terms(
    logits: &[f64],
    value: f64,
    mask: &[bool],
    action: usize,
    old_logp: f64,
    advantage: f64,
    ret: f64,
    cfg: &TrainConfig,
) -> Result<SampleTerms> {
    let logp = masked_log_softmax(logits, mask)?;
    let ratio = (logp[action] - old_logp).exp();
    let (lo, hi) = cfg.clip_range;
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(lo, hi) * advantage;
    let surrogate = unclipped.min(clipped);
    // The unclipped branch is the one carrying gradient whenever it is active.
    let d_logp = if unclipped <= clipped { -ratio * advantage } else { 0.0 };

    let probs: Vec<f64> = logp.iter().map(|&l| if l.is_finite() { l.exp() } else { 0.0 }).collect();
    let entropy: f64 = -probs
        .iter()
        .zip(&logp)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum::<f64>();

    let mut grad_logits = vec![0.0; logits.len()];
    for j in 0..logits.len() {
        if !mask[j] {
            continue;
        }
        let p = probs[j];
        let indicator = if j == action { 1.0 } else { 0.0 };
        let mut g = d_logp * (indicator - p);
        if p > 0.0 {
            g += cfg.entropy_coef * p * (logp[j] + entropy);
        }
        grad_logits[j] = g;
    }
    let err = value - ret;
    Ok(SampleTerms {
        policy: -surrogate,
        value: 0.5 * err * err,
        entropy,
        kl: old_logp - logp[action],
        clipped: ratio < lo || ratio > hi,
        grad_logits,
        grad_value: cfg.value_coef * err,
    })
}

/// Mean loss over the batch: clipped surrogate, value error and entropy bonus.
pub fn ppo_loss(params: &PolicyParams, batch: &Batch, cfg: &TrainConfig) -> Result<LossStats> {
    Ok(ppo_gradients_inner(params, batch, cfg, false)?.1)
}

/// Gradient of [`ppo_loss`] with respect to every actor and critic parameter.
pub fn ppo_gradients(params: &PolicyParams, batch: &Batch, cfg: &TrainConfig) -> Result<(PolicyParams, LossStats)> {
    let (grads, stats) = ppo_gradients_inner(params, batch, cfg, true)?;
    Ok((grads.expect("gradients requested"), stats))
}

fn ppo_gradients_inner(
    params: &PolicyParams,
    batch: &Batch,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(Option<PolicyParams>, LossStats)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Config("empty training batch".into()));
    }
    let scale = 1.0 / n as f64;
    let mut grads = want_grads.then(|| PolicyParams {
        actor: params.actor.zeros_like(),
        critic: params.critic.zeros_like(),
    });
    let mut stats = LossStats::default();
    let mut clipped = 0usize;
    for i in 0..n {
        let critic_trace = params.critic.trace(&batch.obs[i])?;
        if batch.masks[i].iter().filter(|&&m| m).count() == 1 {
            // A forced move has log-probability 0 under every parameter
            // setting, so the actor term and its gradient vanish exactly.
            let err = critic_trace.output()[0] - batch.returns[i];
            stats.value += 0.5 * err * err * scale;
            if let Some(g) = grads.as_mut() {
                params.critic.backward(&critic_trace, &[cfg.value_coef * err * scale], &mut g.critic);
            }
            continue;
        }
        let actor_trace = params.actor.trace(&batch.obs[i])?;
        let terms = sample_terms(
            actor_trace.output(),
            critic_trace.output()[0],
            &batch.masks[i],
            batch.actions[i],
            batch.old_log_probs[i],
            batch.advantages[i],
            batch.returns[i],
            cfg,
        )?;
        stats.policy += terms.policy * scale;
        stats.value += terms.value * scale;
        stats.entropy += terms.entropy * scale;
        stats.approx_kl += terms.kl * scale;
        clipped += terms.clipped as usize;
        if let Some(g) = grads.as_mut() {
            let gl: Vec<f64> = terms.grad_logits.iter().map(|v| v * scale).collect();
            params.actor.backward(&actor_trace, &gl, &mut g.actor);
            params.critic.backward(&critic_trace, &[terms.grad_value * scale], &mut g.critic);
        }
    }
    stats.clip_fraction = clipped as f64 / n as f64;
    stats.total = stats.policy + cfg.value_coef * stats.value - cfg.entropy_coef * stats.entropy;
    Ok((grads, stats))
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
    velocity: Option<PolicyParams>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Sgd {
        Sgd {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            max_grad_norm: cfg.max_grad_norm,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &PolicyParams) {
        let norm = (grads.actor.norm_sq() + grads.critic.norm_sq()).sqrt();
        let factor = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let velocity = self.velocity.get_or_insert_with(|| PolicyParams {
            actor: params.actor.zeros_like(),
            critic: params.critic.zeros_like(),
        });
        let lr = self.learning_rate;
        let mu = self.momentum;
        let update = |p: &mut Mlp, v: &mut Mlp, g: &Mlp| {
            for ((p, v), g) in p.params_mut().zip(v.params_mut()).zip(g.params()) {
                *v = mu * *v + factor * g;
                *p -= lr * *v;
            }
        };
        update(&mut params.actor, &mut velocity.actor, &grads.actor);
        update(&mut params.critic, &mut velocity.critic, &grads.critic);
    }
}

/// One optimizer step on the clipped surrogate plus value loss.
pub fn ppo_update(
    params: &mut PolicyParams,
    opt: &mut Sgd,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossStats> {
    let (grads, stats) = ppo_gradients(params, batch, cfg)?;
    if !stats.total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!(
                "policy {:.4e}, value {:.4e}, entropy {:.4e}",
                stats.policy, stats.value, stats.entropy
            ),
        });
    }
    opt.step(params, &grads);
    Ok(stats)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_steps: f64,
    pub blackout_rate: f64,
    pub loss: LossStats,
}

/// Creates a freshly initialized policy for `env`.
pub fn init_policy<E: Environment>(env: &E, normalizer: Normalizer, cfg: &TrainConfig) -> Result<Policy> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1417]));
    let params = PolicyParams::new(env.obs_len(), &cfg.hidden, env.n_actions(), &mut rng);
    Policy::new(params, normalizer)
}

/// Collects the episodes of one epoch. Episode `j` of epoch `e` plays start
/// `(e * episodes_per_epoch + j) mod n_episodes` with its own RNG stream, so
/// the result does not depend on thread scheduling.
pub fn collect_epoch<E: Environment>(
    env: &E,
    policy: &Policy,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Trajectory>> {
    let n = env.n_episodes().max(1);
    (0..cfg.episodes_per_epoch)
        .into_par_iter()
        .map(|j| {
            let episode = (epoch * cfg.episodes_per_epoch + j) % n;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64, j as u64]));
            collect_episode(env, policy, episode, cfg.rollout_length, &mut rng)
        })
        .collect()
}

pub fn epoch_summary(epoch: usize, trajs: &[Trajectory]) -> EpochStats {
    let n = trajs.len().max(1) as f64;
    EpochStats {
        epoch,
        mean_reward: trajs.iter().map(Trajectory::total_reward).sum::<f64>() / n,
        mean_steps: trajs.iter().map(|t| t.len() as f64).sum::<f64>() / n,
        blackout_rate: trajs.iter().filter(|t| t.blackout).count() as f64 / n,
        loss: LossStats::default(),
    }
}

/// Updates `policy` in place on one epoch of collected data.
pub fn update_on(
    policy: &mut Policy,
    opt: &mut Sgd,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossStats> {
    let batch = Batch::from_trajectories(trajs, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64]));
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut last = LossStats::default();
    for _ in 0..cfg.update_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // A short tail would get an outsized step; fold it into the epoch's next pass.
            if chunk.len() < cfg.batch_size && batch.len() >= cfg.batch_size {
                continue;
            }
            last = ppo_update(&mut policy.params, opt, &batch.select(chunk), cfg, epoch)?;
        }
    }
    Ok(last)
}

/// Collect, estimate advantages and update, `cfg.epochs` times. `on_epoch` sees
/// each epoch's statistics and the updated policy.
pub fn train_policy_with<E: Environment>(
    env: &E,
    initial: Policy,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Policy) -> Result<()>,
) -> Result<(Policy, Vec<EpochStats>)> {
    cfg.validate()?;
    if initial.params.obs_len() != env.obs_len() {
        return Err(Error::ShapeMismatch {
            what: "policy observation length",
            expected: env.obs_len(),
            actual: initial.params.obs_len(),
        });
    }
    if initial.params.action_count() != env.n_actions() {
        return Err(Error::ShapeMismatch {
            what: "policy action count",
            expected: env.n_actions(),
            actual: initial.params.action_count(),
        });
    }
    let mut policy = initial;
    let mut opt = Sgd::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let trajs = collect_epoch(env, &policy, cfg, epoch)?;
        let mut stats = epoch_summary(epoch, &trajs);
        stats.loss = update_on(&mut policy, &mut opt, &trajs, cfg, epoch)?;
        on_epoch(&stats, &policy)?;
        history.push(stats);
    }
    Ok((policy, history))
}

pub fn train_policy<E: Environment>(env: &E, initial: Policy, cfg: &TrainConfig) -> Result<(Policy, Vec<EpochStats>)> {
    train_policy_with(env, initial, cfg, |_, _| Ok(()))
}
