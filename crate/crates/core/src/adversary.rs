//! Line-cutting attackers: the attack schedule, uniform and flow-weighted
//! baselines, learned policies, and the attacker's own MDP in which the
//! operator is frozen and the attacker is paid the negated operator reward.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::{observe, AdversaryAction, AgentAction, Env, EnvConfig, GridState, Normalizer};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::policy::Policy;
use crate::ppo::{init_policy, train_policy_with, EpochStats, Environment, TrainConfig, Transition};
use crate::scenario::Scenario;

/// Attacks are allowed only on steps `t > 0` with `t % k == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSchedule {
    pub k: usize,
}

impl Default for AttackSchedule {
    fn default() -> Self {
        AttackSchedule { k: 50 }
    }
}

impl AttackSchedule {
    pub fn permits(&self, t: usize) -> bool {
        self.k > 0 && t > 0 && t.is_multiple_of(self.k)
    }
}

/// What the flow-weighted attacker uses as a line's weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowWeights {
    /// Largest `|flow|` observed on the line so far this episode.
    #[default]
    RunningMax,
    /// The line's static thermal limit.
    ThermalLimit,
}

#[derive(Clone, Debug)]
pub enum Adversary {
    None,
    Random { lines: Vec<usize> },
    Weighted { lines: Vec<usize>, weights: FlowWeights },
    Learned { policy: Arc<Policy>, lines: Vec<usize> },
}

impl Adversary {
    pub fn label(&self) -> &'static str {
        match self {
            Adversary::None => "none",
            Adversary::Random { .. } => "random",
            Adversary::Weighted { .. } => "weighted",
            Adversary::Learned { .. } => "learned",
        }
    }

    pub fn learned(policy: Policy, lines: Vec<usize>) -> Adversary {
        Adversary::Learned {
            policy: Arc::new(policy),
            lines,
        }
    }

    /// The attack on state `s` (before the scenario advances).
    pub fn choose(
        &self,
        env: &Env,
        state: &GridState,
        schedule: &AttackSchedule,
        rng: &mut impl Rng,
    ) -> Result<AdversaryAction> {
        if state.done || !schedule.permits(state.t) {
            return Ok(AdversaryAction::NONE);
        }
        Ok(match self {
            Adversary::None => AdversaryAction::NONE,
            Adversary::Random { lines } => random_adversary(state, lines, rng),
            Adversary::Weighted { lines, weights } => {
                weighted_random_adversary(&env.grid, state, lines, *weights, rng)
            }
            Adversary::Learned { policy, lines } => {
                let mask = adversary_mask(state, lines, schedule);
                let index = policy.greedy(&observe(&env.grid, state), &mask)?;
                adversary_action(lines, index)
            }
        })
    }
}

fn connected_targets<'a>(state: &'a GridState, lines: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    lines.iter().copied().filter(|&l| state.topo.line_status[l])
}

/// Uniform over connected attackable lines; no-op if there are none.
pub fn random_adversary(state: &GridState, lines: &[usize], rng: &mut impl Rng) -> AdversaryAction {
    let live: Vec<usize> = connected_targets(state, lines).collect();
    if live.is_empty() {
        return AdversaryAction::NONE;
    }
    AdversaryAction::line(live[rng.gen_range(0..live.len())])
}

/// Proportional to each connected attackable line's weight. Falls back to
/// uniform when every weight is zero.
pub fn weighted_random_adversary(
    grid: &GridSpec,
    state: &GridState,
    lines: &[usize],
    weights: FlowWeights,
    rng: &mut impl Rng,
) -> AdversaryAction {
    let live: Vec<usize> = connected_targets(state, lines).collect();
    if live.is_empty() {
        return AdversaryAction::NONE;
    }
    let w: Vec<f64> = live
        .iter()
        .map(|&l| match weights {
            FlowWeights::RunningMax => state.max_flow[l],
            FlowWeights::ThermalLimit => grid.lines[l].thermal_limit,
        })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return AdversaryAction::line(live[rng.gen_range(0..live.len())]);
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&l, &wi) in live.iter().zip(&w) {
        acc += wi;
        if u < acc {
            return AdversaryAction::line(l);
        }
    }
    AdversaryAction::line(*live.last().unwrap())
}

/// Index 0 is the no-op; index `i + 1` cuts `lines[i]`.
pub fn adversary_action(lines: &[usize], index: usize) -> AdversaryAction {
    if index == 0 {
        AdversaryAction::NONE
    } else {
        AdversaryAction::line(lines[index - 1])
    }
}

/// Off-schedule only the no-op is legal; on schedule, the no-op and every
/// connected attackable line.
pub fn adversary_mask(state: &GridState, lines: &[usize], schedule: &AttackSchedule) -> Vec<bool> {
    let open = schedule.permits(state.t) && !state.done;
    std::iter::once(true)
        .chain(lines.iter().map(|&l| open && state.topo.line_status[l]))
        .collect()
}

/// Attacker state: the grid before this step's attack.
#[derive(Clone, Debug)]
pub struct AdversaryState {
    pub scenario: usize,
    pub grid: GridState,
}

/// The attacker's MDP: same states as the operator, actions are line cuts,
/// transitions include the frozen operator's reply, reward is `-r`.
#[derive(Clone, Debug)]
pub struct AdversaryEnv {
    pub envs: Vec<Env>,
    pub agent: Agent,
    pub lines: Vec<usize>,
    pub schedule: AttackSchedule,
}

/// What happened in one attacker step, with the operator's view of it.
#[derive(Clone, Debug)]
pub struct AdversaryStep {
    pub state: AdversaryState,
    pub reward: f64,
    pub agent_reward: f64,
    pub agent_action: AgentAction,
    pub done: bool,
    pub blackout: bool,
}

impl AdversaryEnv {
    pub fn new(envs: Vec<Env>, agent: Agent, lines: Vec<usize>, schedule: AttackSchedule) -> Result<AdversaryEnv> {
        if envs.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        if let Some(&bad) = lines.iter().find(|&&l| l >= envs[0].grid.n_lines()) {
            return Err(Error::Config(format!("attackable line {bad} does not exist")));
        }
        Ok(AdversaryEnv {
            envs,
            agent,
            lines,
            schedule,
        })
    }

    /// Applies the attack, lets the frozen operator respond, and returns `-r`.
    pub fn adversary_step(&self, state: &AdversaryState, action: usize) -> Result<AdversaryStep> {
        let env = &self.envs[state.scenario];
        let mask = adversary_mask(&state.grid, &self.lines, &self.schedule);
        // A masked choice cannot come from the sampler; treat it as the no-op.
        let attack = if mask.get(action).copied().unwrap_or(false) {
            adversary_action(&self.lines, action)
        } else {
            AdversaryAction::NONE
        };
        let mid = env.attack(&state.grid, attack);
        let choice = self.agent.choose(env, &mid)?;
        let agent_action = env.actions.get(choice);
        let out = env.act(&mid, agent_action);
        Ok(AdversaryStep {
            state: AdversaryState {
                scenario: state.scenario,
                grid: out.state,
            },
            // 0 - r rather than -r so that a blackout pays +0.0.
            reward: 0.0 - out.reward,
            agent_reward: out.reward,
            agent_action,
            done: out.done,
            blackout: out.blackout.is_some(),
        })
    }
}

impl Environment for AdversaryEnv {
    type State = AdversaryState;

    fn obs_len(&self) -> usize {
        crate::env::observation_len(&self.envs[0].grid)
    }

    fn n_actions(&self) -> usize {
        1 + self.lines.len()
    }

    fn n_episodes(&self) -> usize {
        self.envs.len()
    }

    fn reset(&self, episode: usize) -> Result<AdversaryState> {
        let scenario = episode % self.envs.len();
        Ok(AdversaryState {
            scenario,
            grid: self.envs[scenario].reset()?,
        })
    }

    fn observe(&self, state: &AdversaryState) -> Vec<f64> {
        self.envs[state.scenario].observe(&state.grid)
    }

    fn mask(&self, state: &AdversaryState) -> Vec<bool> {
        adversary_mask(&state.grid, &self.lines, &self.schedule)
    }

    fn step(&self, state: &AdversaryState, action: usize, _rng: &mut ChaCha8Rng) -> Result<Transition<AdversaryState>> {
        let s = self.adversary_step(state, action)?;
        Ok(Transition {
            state: s.state,
            reward: s.reward,
            done: s.done,
            blackout: s.blackout,
        })
    }
}

/// Trains an attacker against `victim` (white-box: the victim's exact policy).
pub fn train_whitebox_adversary(
    envs: Vec<Env>,
    victim: Agent,
    lines: Vec<usize>,
    schedule: AttackSchedule,
    normalizer: Normalizer,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats, &Policy) -> Result<()>,
) -> Result<(Policy, Vec<EpochStats>)> {
    let adv_env = AdversaryEnv::new(envs, victim, lines, schedule)?;
    let initial = init_policy(&adv_env, normalizer, cfg)?;
    train_policy_with(&adv_env, initial, cfg, on_epoch)
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub reward: f64,
    pub steps: usize,
    pub blackout: bool,
    /// `(t, line)` for every attack that disconnected something.
    pub attacks: Vec<(usize, usize)>,
}

/// Plays one full episode with the fixed interaction order: the attacker
/// observes `s_{t-1}`, the line is cut, demand advances, the operator acts.
pub fn run_episode(
    env: &Env,
    agent: &Agent,
    adversary: &Adversary,
    schedule: &AttackSchedule,
    rng: &mut impl Rng,
) -> Result<EpisodeResult> {
    let mut state = env.reset()?;
    let mut result = EpisodeResult {
        reward: 0.0,
        steps: 0,
        blackout: false,
        attacks: Vec::new(),
    };
    while !state.done {
        let attack = adversary.choose(env, &state, schedule, rng)?;
        if let Some(line) = attack.target {
            result.attacks.push((state.t, line));
        }
        let mid = env.attack(&state, attack);
        let action = agent.choose(env, &mid)?;
        let out = env.act(&mid, env.actions.get(action));
        result.reward += out.reward;
        result.steps += 1;
        result.blackout = out.state.blackout;
        state = out.state;
    }
    Ok(result)
}

/// Lines whose disconnection at `t = 1`, with the operator doing nothing,
/// blacks out the grid on that same step in any scenario.
pub fn screen_immediate_blackout_lines(grid: &GridSpec, scenarios: &[Scenario], config: &EnvConfig) -> Result<Vec<usize>> {
    let grid = Arc::new(grid.clone());
    let mut flagged = vec![false; grid.n_lines()];
    for scenario in scenarios {
        let env = Env::new(grid.clone(), Arc::new(scenario.clone()), config);
        let start = env.reset()?;
        let first = env.step(&start, AgentAction::DoNothing, AdversaryAction::NONE);
        if first.done {
            continue;
        }
        for (line, hit) in flagged.iter_mut().enumerate() {
            if *hit {
                continue;
            }
            let out = env.step(&first.state, AgentAction::DoNothing, AdversaryAction::line(line));
            *hit = out.blackout.is_some();
        }
    }
    Ok((0..grid.n_lines()).filter(|&l| flagged[l]).collect())
}

/// One line of the attack log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub episode: usize,
    pub scenario: String,
    pub seed: u64,
    pub attacks: Vec<(usize, usize)>,
    pub reward: f64,
    pub steps: usize,
}

pub fn append_attack_records(path: &Path, records: &[AttackRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::parse(path, e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Best attacker return over every open-loop attack plan against a
/// deterministic operator, by exhaustive search. Only practical on tiny
/// horizons; used to check monotonicity in the attackable set.
pub fn best_open_loop_return(env: &Env, agent: &Agent, lines: &[usize], schedule: &AttackSchedule) -> Result<f64> {
    fn search(env: &Env, agent: &Agent, lines: &[usize], schedule: &AttackSchedule, state: &GridState) -> Result<f64> {
        if state.done {
            return Ok(0.0);
        }
        let options: Vec<AdversaryAction> = if schedule.permits(state.t) {
            std::iter::once(AdversaryAction::NONE)
                .chain(connected_targets(state, lines).map(AdversaryAction::line))
                .collect()
        } else {
            vec![AdversaryAction::NONE]
        };
        let mut best = f64::NEG_INFINITY;
        for attack in options {
            let mid = env.attack(state, attack);
            let action = agent.choose(env, &mid)?;
            let out = env.act(&mid, env.actions.get(action));
            let value = -out.reward + search(env, agent, lines, schedule, &out.state)?;
            best = best.max(value);
        }
        Ok(best)
    }
    search(env, agent, lines, schedule, &env.reset()?)
}
