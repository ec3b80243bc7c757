//! Operator agents and the operator's training environment.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::adversary::{Adversary, AttackSchedule};
use crate::env::{ActionGate, AgentAction, Env, GridState};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::ppo::{Environment, Transition};

/// Ways of choosing the operator's action after the adversary has moved.
#[derive(Clone, Debug)]
pub enum Agent {
    DoNothing,
    /// One-step lookahead: avoid blackout, then minimize total overload, then
    /// minimize operations cost; ties go to the lowest action index (no-op).
    Greedy,
    /// Highest-probability legal action of a trained policy.
    Learned { policy: Arc<Policy>, gate: ActionGate },
}

impl Agent {
    pub fn learned(policy: Policy, gate: ActionGate) -> Agent {
        Agent::Learned {
            policy: Arc::new(policy),
            gate,
        }
    }

    /// Index into `env.actions` chosen in state `mid` (after the attack phase).
    pub fn choose(&self, env: &Env, mid: &GridState) -> Result<usize> {
        match self {
            Agent::DoNothing => Ok(0),
            Agent::Greedy => Ok(greedy_lookahead(env, mid)),
            Agent::Learned { policy, gate } => {
                let mut mask = env.legal_mask(mid);
                gate.apply(&env.actions, mid, &mut mask);
                policy.greedy(&env.observe(mid), &mask)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Agent::DoNothing => "do-nothing",
            Agent::Greedy => "greedy",
            Agent::Learned { .. } => "learned",
        }
    }
}

/// Sum over lines of loading above 100%.
pub fn overload_excess(state: &GridState) -> f64 {
    state.sol.loading.iter().map(|l| (l - 1.0).max(0.0)).sum()
}

fn greedy_lookahead(env: &Env, mid: &GridState) -> usize {
    let mask = env.legal_mask(mid);
    let mut best = 0;
    let mut best_key = (true, f64::INFINITY, f64::INFINITY);
    for (i, &legal) in mask.iter().enumerate() {
        if !legal {
            continue;
        }
        let out = env.act(mid, env.actions.get(i));
        let key = (out.state.blackout, overload_excess(&out.state), out.cost);
        if !key.0 && best_key.0
            || (key.0 == best_key.0 && (key.1 < best_key.1 || (key.1 == best_key.1 && key.2 < best_key.2)))
        {
            best = i;
            best_key = key;
        }
    }
    best
}

/// Operator state: the post-attack grid of one scenario.
#[derive(Clone, Debug)]
pub struct OperatorState {
    pub scenario: usize,
    pub grid: GridState,
}

/// The operator's MDP over a scenario set, optionally perturbed by a fixed
/// adversary. Each step plays: agent acts on the attacked state, flows and
/// protection resolve, then the adversary observes the result and the next
/// attack and demand advance happen before the agent's next observation.
#[derive(Clone, Debug)]
pub struct OperatorEnv {
    pub envs: Vec<Env>,
    pub adversary: Adversary,
    pub schedule: AttackSchedule,
    pub gate: ActionGate,
}

impl OperatorEnv {
    pub fn new(envs: Vec<Env>, adversary: Adversary, schedule: AttackSchedule, gate: ActionGate) -> Result<OperatorEnv> {
        if envs.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        Ok(OperatorEnv {
            envs,
            adversary,
            schedule,
            gate,
        })
    }

    fn advance(&self, scenario: usize, state: &GridState, rng: &mut ChaCha8Rng) -> Result<GridState> {
        let env = &self.envs[scenario];
        let attack = self.adversary.choose(env, state, &self.schedule, rng)?;
        Ok(env.attack(state, attack))
    }
}

impl Environment for OperatorEnv {
    type State = OperatorState;

    fn obs_len(&self) -> usize {
        crate::env::observation_len(&self.envs[0].grid)
    }

    fn n_actions(&self) -> usize {
        self.envs[0].actions.len()
    }

    fn n_episodes(&self) -> usize {
        self.envs.len()
    }

    fn reset(&self, episode: usize) -> Result<OperatorState> {
        let scenario = episode % self.envs.len();
        let start = self.envs[scenario].reset()?;
        // No attack is permitted at t = 0, so no randomness is consumed here.
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let grid = self.advance(scenario, &start, &mut rng)?;
        Ok(OperatorState { scenario, grid })
    }

    fn observe(&self, state: &OperatorState) -> Vec<f64> {
        self.envs[state.scenario].observe(&state.grid)
    }

    fn mask(&self, state: &OperatorState) -> Vec<bool> {
        let env = &self.envs[state.scenario];
        let mut mask = env.legal_mask(&state.grid);
        self.gate.apply(&env.actions, &state.grid, &mut mask);
        mask
    }

    fn step(&self, state: &OperatorState, action: usize, rng: &mut ChaCha8Rng) -> Result<Transition<OperatorState>> {
        let env = &self.envs[state.scenario];
        let out = env.act(&state.grid, env.actions.get(action));
        let grid = if out.done {
            out.state
        } else {
            self.advance(state.scenario, &out.state, rng)?
        };
        Ok(Transition {
            state: OperatorState {
                scenario: state.scenario,
                grid,
            },
            reward: out.reward,
            done: out.done,
            blackout: out.blackout.is_some(),
        })
    }
}

/// Agent action that would be applied for `index`, for logging.
pub fn describe_action(env: &Env, index: usize) -> String {
    match env.actions.get(index) {
        AgentAction::DoNothing => "no-op".into(),
        AgentAction::ChangeBus(e) => format!("bus {e:?}"),
        AgentAction::Reconnect(l) => format!("reconnect {l}"),
        AgentAction::Redispatch { generator, delta } => format!("gen {generator} {delta:+.3}"),
    }
}
