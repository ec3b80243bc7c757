//! The operation MDP: scenario playback, action application, reward and blackout.
//!
//! A step is split in two phases so that an adversary can act on `s_{t-1}`
//! and the agent can observe the result before choosing its own action:
//!
//! 1. [`Env::attack`]: tick cooldowns, disconnect the attacked line, advance
//!    demand to `t + 1` and re-solve flows (no protection yet).
//! 2. [`Env::act`]: apply the agent's topology change or redispatch, solve,
//!    run thermal protection once, detect blackout and compute the reward.
//!
//! [`Env::step`] runs both phases back to back.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    apply_topology_action, build_susceptance, connected_components, substation_isolated, Element,
    GridSpec, IllegalAction, Topology, TopologyAction,
};
use crate::powerflow::{
    cascade_step, energy_loss, solve_dc, FlowSolution, Injections, OverflowState,
};
use crate::scenario::Scenario;

const LIMIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Weight of the redispatch term in the operations cost.
    pub alpha: f64,
    /// Reward offset `C`. Computed from the grid when absent.
    pub reward_offset: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            alpha: 1.0,
            reward_offset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub topo: Topology,
    /// Output per generator. Non-slack entries are setpoints; the slack entry
    /// is whatever balances the main island.
    pub p_gen: Vec<f64>,
    /// Demand per load at step `t`.
    pub p_load: Vec<f64>,
    pub sol: FlowSolution,
    pub overflow: OverflowState,
    /// Largest `|flow|` seen on each line so far this episode.
    pub max_flow: Vec<f64>,
    pub t: usize,
    pub horizon: usize,
    pub done: bool,
    pub blackout: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlackoutCause {
    IslandedLoad(usize),
    SlackSaturation(f64),
    SolveFailure,
}

/// A flat agent action. At most one thing changes per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AgentAction {
    DoNothing,
    ChangeBus(Element),
    Reconnect(usize),
    Redispatch { generator: usize, delta: f64 },
}

impl AgentAction {
    pub fn topology(&self) -> TopologyAction {
        match *self {
            AgentAction::ChangeBus(e) => TopologyAction::ChangeBus(e),
            AgentAction::Reconnect(l) => TopologyAction::Reconnect(l),
            _ => TopologyAction::NoOp,
        }
    }
}

/// Line disconnection chosen by the adversary, if any.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryAction {
    pub target: Option<usize>,
}

impl AdversaryAction {
    pub const NONE: AdversaryAction = AdversaryAction { target: None };

    pub fn line(line: usize) -> AdversaryAction {
        AdversaryAction { target: Some(line) }
    }
}

/// Enumerated agent action set: no-op, every single-element bus change, every
/// line reconnection, and `+/- ramp_limit` for each non-slack generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub actions: Vec<AgentAction>,
}

impl ActionSpace {
    pub fn new(grid: &GridSpec) -> ActionSpace {
        let mut actions = vec![AgentAction::DoNothing];
        actions.extend((0..grid.n_elements()).map(|i| AgentAction::ChangeBus(grid.element(i).unwrap())));
        actions.extend((0..grid.n_lines()).map(AgentAction::Reconnect));
        let slack = grid.slack_generator();
        for (g, gen) in grid.generators.iter().enumerate() {
            if g == slack {
                continue;
            }
            actions.push(AgentAction::Redispatch {
                generator: g,
                delta: gen.ramp_limit,
            });
            actions.push(AgentAction::Redispatch {
                generator: g,
                delta: -gen.ramp_limit,
            });
        }
        ActionSpace { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, index: usize) -> AgentAction {
        self.actions[index]
    }
}

/// Restricts the agent to no-op and reconnections while every line is below
/// `danger_threshold` loading. Without a threshold the agent may always act.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionGate {
    pub danger_threshold: Option<f64>,
}

impl ActionGate {
    pub fn apply(&self, actions: &ActionSpace, state: &GridState, mask: &mut [bool]) {
        let Some(threshold) = self.danger_threshold else {
            return;
        };
        if state.sol.max_loading() >= threshold {
            return;
        }
        for (m, a) in mask.iter_mut().zip(&actions.actions) {
            if !matches!(a, AgentAction::DoNothing | AgentAction::Reconnect(_)) {
                *m = false;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: GridState,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    /// Set when the agent's action was illegal and replaced by a no-op.
    pub illegal: Option<IllegalAction>,
    pub tripped: Vec<usize>,
    pub blackout: Option<BlackoutCause>,
}

struct Solved {
    sol: FlowSolution,
    slack_output: f64,
    blackout: Option<BlackoutCause>,
}

/// One grid playing one scenario. Cheap to clone; all state lives in [`GridState`].
#[derive(Clone, Debug)]
pub struct Env {
    pub grid: Arc<GridSpec>,
    pub scenario: Arc<Scenario>,
    pub actions: Arc<ActionSpace>,
    pub alpha: f64,
    pub reward_offset: f64,
}

impl Env {
    pub fn new(grid: Arc<GridSpec>, scenario: Arc<Scenario>, config: &EnvConfig) -> Env {
        let actions = Arc::new(ActionSpace::new(&grid));
        Self::with_actions(grid, scenario, actions, config)
    }

    pub fn with_actions(
        grid: Arc<GridSpec>,
        scenario: Arc<Scenario>,
        actions: Arc<ActionSpace>,
        config: &EnvConfig,
    ) -> Env {
        let reward_offset = config
            .reward_offset
            .unwrap_or_else(|| grid.reward_offset(config.alpha));
        Env {
            grid,
            scenario,
            actions,
            alpha: config.alpha,
            reward_offset,
        }
    }

    pub fn horizon(&self) -> usize {
        self.scenario.horizon()
    }

    /// Reference topology with demand and dispatch of row 0.
    pub fn reset(&self) -> Result<GridState> {
        self.reset_at(0)
    }

    /// Like [`Env::reset`] but starting from row `t`. Generators are dispatched
    /// at a common fraction of `p_max` that covers the demand.
    pub fn reset_at(&self, t: usize) -> Result<GridState> {
        let grid = &*self.grid;
        let scenario = &*self.scenario;
        if t >= scenario.loads.len() {
            return Err(Error::Config(format!(
                "start row {t} beyond scenario {}",
                scenario.name
            )));
        }
        let p_load = scenario.loads[t].clone();
        let demand: f64 = p_load.iter().sum();
        let capacity: f64 = grid
            .generators
            .iter()
            .zip(&scenario.gen_max[t])
            .map(|(g, &avail)| g.p_max.min(avail))
            .sum();
        if demand > capacity + LIMIT_TOLERANCE {
            return Err(Error::InfeasibleStart {
                scenario: scenario.name.clone(),
                reason: format!("demand {demand:.4} exceeds available generation {capacity:.4}"),
            });
        }
        let total_pmax: f64 = grid.generators.iter().map(|g| g.p_max).sum();
        let fraction = if total_pmax > 0.0 { demand / total_pmax } else { 0.0 };
        let p_gen: Vec<f64> = grid
            .generators
            .iter()
            .zip(&scenario.gen_max[t])
            .map(|(g, &avail)| (fraction * g.p_max).clamp(g.p_min, g.p_max.min(avail)))
            .collect();
        let topo = Topology::reference(grid);
        let solved = self.solve(&topo, &p_gen, &p_load);
        if let Some(cause) = solved.blackout {
            return Err(Error::InfeasibleStart {
                scenario: scenario.name.clone(),
                reason: format!("initial power flow fails: {cause:?}"),
            });
        }
        let mut p_gen = p_gen;
        p_gen[grid.slack_generator()] = solved.slack_output;
        let max_flow = solved.sol.flows.iter().map(|f| f.abs()).collect();
        Ok(GridState {
            topo,
            p_gen,
            p_load,
            sol: solved.sol,
            overflow: OverflowState::new(grid.n_lines()),
            max_flow,
            t,
            horizon: scenario.horizon(),
            done: false,
            blackout: false,
        })
    }

    /// Solves flows for the main island. Loads cut off from the slack, a slack
    /// outside its limits, or a failed solve all mean blackout.
    fn solve(&self, topo: &Topology, p_gen: &[f64], p_load: &[f64]) -> Solved {
        let grid = &*self.grid;
        let slack = grid.slack_generator();
        let comps = connected_components(grid, topo);
        let matrix = build_susceptance(grid, topo);
        let nodes = &matrix.nodes;
        let mut injections = vec![0.0; nodes.len()];
        let mut blackout = None;
        let mut served = 0.0;
        let mut produced = 0.0;
        for (d, &p) in p_load.iter().enumerate() {
            let node = nodes
                .node_of(grid, topo, Element::Load(d))
                .expect("loads always occupy a bus");
            if comps.in_main(node) {
                injections[node] -= p;
                served += p;
            } else if p > 0.0 && blackout.is_none() {
                blackout = Some(BlackoutCause::IslandedLoad(d));
            }
        }
        for (g, &p) in p_gen.iter().enumerate() {
            if g == slack {
                continue;
            }
            let node = nodes
                .node_of(grid, topo, Element::Generator(g))
                .expect("generators always occupy a bus");
            if comps.in_main(node) {
                injections[node] += p;
                produced += p;
            }
        }
        let slack_output = served - produced;
        let slack_spec = &grid.generators[slack];
        if blackout.is_none()
            && (slack_output > slack_spec.p_max + LIMIT_TOLERANCE
                || slack_output < slack_spec.p_min - LIMIT_TOLERANCE)
        {
            blackout = Some(BlackoutCause::SlackSaturation(slack_output));
        }
        let slack_node = nodes
            .node_of(grid, topo, Element::Generator(slack))
            .expect("slack occupies a bus");
        injections[slack_node] += slack_output;
        match solve_dc(grid, topo, &matrix, &Injections { p: injections }, slack_node) {
            Ok(sol) => Solved {
                sol,
                slack_output,
                blackout,
            },
            Err(_) => Solved {
                sol: FlowSolution::zero(grid, nodes.len()),
                slack_output,
                blackout: Some(BlackoutCause::SolveFailure),
            },
        }
    }

    /// Phase one: the adversary's disconnection and the scenario advance.
    pub fn attack(&self, state: &GridState, attack: AdversaryAction) -> GridState {
        let mut next = state.clone();
        if state.done {
            return next;
        }
        let grid = &*self.grid;
        next.topo.tick_cooldowns();
        if let Some(line) = attack.target {
            if line < grid.n_lines() && next.topo.line_status[line] {
                next.topo.disconnect(line, grid.cascade.reconnect_cooldown);
                next.overflow.counters[line] = 0;
            }
        }
        next.t += 1;
        next.p_load = self.scenario.loads[next.t].clone();
        let solved = self.solve(&next.topo, &next.p_gen, &next.p_load);
        next.p_gen[grid.slack_generator()] = solved.slack_output;
        next.sol = solved.sol;
        next
    }

    /// Phase two: the agent's action, protection, blackout check and reward.
    pub fn act(&self, mid: &GridState, action: AgentAction) -> StepOutcome {
        if mid.done {
            return StepOutcome {
                state: mid.clone(),
                reward: 0.0,
                cost: 0.0,
                done: true,
                illegal: None,
                tripped: Vec::new(),
                blackout: None,
            };
        }
        let grid = &*self.grid;
        let slack = grid.slack_generator();
        let t = mid.t;
        let avail = &self.scenario.gen_max[t];
        let mut next = mid.clone();

        for (g, gen) in grid.generators.iter().enumerate() {
            if g != slack {
                next.p_gen[g] = next.p_gen[g].min(gen.p_max.min(avail[g]));
            }
        }
        let mut illegal = None;
        match action {
            AgentAction::DoNothing => {}
            AgentAction::ChangeBus(_) | AgentAction::Reconnect(_) => {
                match apply_topology_action(grid, &next.topo, action.topology()) {
                    Ok(topo) => next.topo = topo,
                    Err(e) => illegal = Some(e),
                }
            }
            AgentAction::Redispatch { generator, delta } => {
                let gen = &grid.generators[generator];
                let step = delta.clamp(-gen.ramp_limit, gen.ramp_limit);
                let upper = gen.p_max.min(avail[generator]);
                let lower = gen.p_min.min(upper);
                next.p_gen[generator] = (next.p_gen[generator] + step).clamp(lower, upper);
            }
        }

        let mut solved = self.solve(&next.topo, &next.p_gen, &next.p_load);
        let mut tripped = Vec::new();
        if solved.blackout.is_none() {
            let out = cascade_step(grid, &solved.sol, &next.overflow, &next.topo);
            next.overflow = out.overflow;
            if !out.disconnected.is_empty() {
                next.topo = out.topology;
                tripped = out.disconnected;
                solved = self.solve(&next.topo, &next.p_gen, &next.p_load);
            }
        }
        next.p_gen[slack] = solved.slack_output;
        next.sol = solved.sol;
        for (m, f) in next.max_flow.iter_mut().zip(&next.sol.flows) {
            *m = m.max(f.abs());
        }
        let blackout = solved.blackout;
        next.blackout = blackout.is_some();
        next.done = next.blackout || next.t >= next.horizon;
        let cost = self.operations_cost(mid, &next);
        let reward = if next.blackout {
            0.0
        } else {
            self.reward_offset - cost
        };
        StepOutcome {
            done: next.done,
            state: next,
            reward,
            cost,
            illegal,
            tripped,
            blackout,
        }
    }

    /// Both phases with the interaction order fixed: attack, advance, act, solve.
    pub fn step(&self, state: &GridState, action: AgentAction, attack: AdversaryAction) -> StepOutcome {
        let mid = self.attack(state, attack);
        self.act(&mid, action)
    }

    /// `E_loss(cur) + alpha * sum |p_G(cur) - p_G(prev)|` over dispatchable generators.
    pub fn operations_cost(&self, prev: &GridState, cur: &GridState) -> f64 {
        operations_cost(&self.grid, self.alpha, prev, cur)
    }

    pub fn legal_mask(&self, state: &GridState) -> Vec<bool> {
        let grid = &*self.grid;
        let avail = &self.scenario.gen_max[state.t.min(self.scenario.loads.len() - 1)];
        self.actions
            .actions
            .iter()
            .map(|a| match *a {
                AgentAction::DoNothing => true,
                AgentAction::ChangeBus(e) => {
                    !substation_isolated(grid, &state.topo, grid.element_substation(e))
                }
                AgentAction::Reconnect(l) => {
                    !state.topo.line_status[l] && state.topo.cooldowns[l] == 0
                }
                AgentAction::Redispatch { generator, delta } => {
                    let gen = &grid.generators[generator];
                    let upper = gen.p_max.min(avail[generator]);
                    let p = state.p_gen[generator];
                    if delta > 0.0 {
                        p < upper - LIMIT_TOLERANCE
                    } else {
                        p > gen.p_min + LIMIT_TOLERANCE
                    }
                }
            })
            .collect()
    }

    pub fn observe(&self, state: &GridState) -> Vec<f64> {
        observe(&self.grid, state)
    }
}

pub fn operations_cost(grid: &GridSpec, alpha: f64, prev: &GridState, cur: &GridState) -> f64 {
    let slack = grid.slack_generator();
    let redispatch: f64 = prev
        .p_gen
        .iter()
        .zip(&cur.p_gen)
        .enumerate()
        .filter(|(g, _)| *g != slack)
        .map(|(_, (a, b))| (b - a).abs())
        .sum();
    energy_loss(grid, &cur.sol) + alpha * redispatch
}

/// Length of the raw observation: `2L + N + G + L + 1`, with `N` substations.
pub fn observation_len(grid: &GridSpec) -> usize {
    3 * grid.n_lines() + grid.n_substations() + grid.n_generators() + 1
}

/// Raw features: line loadings, line status, net injection per substation,
/// generator outputs, overflow counters, elapsed fraction of the episode.
pub fn observe(grid: &GridSpec, state: &GridState) -> Vec<f64> {
    let mut out = Vec::with_capacity(observation_len(grid));
    out.extend(&state.sol.loading);
    out.extend(state.topo.line_status.iter().map(|&on| if on { 1.0 } else { 0.0 }));
    let mut injection = vec![0.0; grid.n_substations()];
    for (g, gen) in grid.generators.iter().enumerate() {
        injection[gen.substation] += state.p_gen[g];
    }
    for (d, load) in grid.loads.iter().enumerate() {
        injection[load.substation] -= state.p_load[d];
    }
    out.extend(injection);
    out.extend(&state.p_gen);
    out.extend(state.overflow.counters.iter().map(|&c| c as f64));
    let horizon = state.horizon.max(1) as f64;
    out.push(state.t as f64 / horizon);
    out
}

/// Per-feature standardization stored alongside a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(len: usize) -> Normalizer {
        Normalizer {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    /// Features with (near) zero spread keep unit scale.
    pub fn fit(samples: &[Vec<f64>]) -> Normalizer {
        let len = samples.first().map_or(0, Vec::len);
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; len];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; len];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
            .collect();
        Normalizer { mean, std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Draws a perturbed, non-blackout state: random start row, random line
/// outages and bus changes, random redispatch, then a few random steps.
pub fn sample_random_state(env: &Env, rng: &mut impl Rng) -> GridState {
    let grid = &*env.grid;
    loop {
        let t0 = rng.gen_range(0..env.horizon().saturating_sub(4).max(1));
        let Ok(mut state) = env.reset_at(t0) else {
            continue;
        };
        for l in 0..grid.n_lines() {
            if rng.gen_bool(0.1) {
                state.topo.disconnect(l, rng.gen_range(0..=grid.cascade.reconnect_cooldown));
            }
        }
        for i in 0..grid.n_elements() {
            if rng.gen_bool(0.02) {
                let topo = apply_topology_action(
                    grid,
                    &state.topo,
                    TopologyAction::ChangeBus(grid.element(i).unwrap()),
                );
                if let Ok(topo) = topo {
                    state.topo = topo;
                }
            }
        }
        let slack = grid.slack_generator();
        for (g, gen) in grid.generators.iter().enumerate() {
            if g != slack {
                let shift = rng.gen_range(-2..=2) as f64 * gen.ramp_limit;
                state.p_gen[g] = (state.p_gen[g] + shift).clamp(gen.p_min, gen.p_max);
            }
        }
        let mut ok = true;
        for _ in 0..rng.gen_range(1..=3) {
            let mid = env.attack(&state, AdversaryAction::NONE);
            let mask = env.legal_mask(&mid);
            let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let choice = if rng.gen_bool(0.5) {
                0
            } else {
                *legal.choose(rng).unwrap()
            };
            let out = env.act(&mid, env.actions.get(choice));
            if out.state.blackout {
                ok = false;
                break;
            }
            state = out.state;
        }
        if ok {
            return state;
        }
    }
}

/// Normalizer fitted on `n` random states drawn across `envs`.
pub fn calibrate_normalizer(envs: &[Env], n: usize, rng: &mut impl Rng) -> Normalizer {
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let env = envs.choose(rng).expect("at least one scenario");
            env.observe(&sample_random_state(env, rng))
        })
        .collect();
    Normalizer::fit(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::triangle;
    use crate::grid::{GeneratorSpec, LoadSpec};

    pub(crate) fn flat_scenario(grid: &GridSpec, demand: &[f64], horizon: usize) -> Scenario {
        Scenario {
            name: "flat".into(),
            loads: vec![demand.to_vec(); horizon + 1],
            gen_max: vec![grid.generators.iter().map(|g| g.p_max).collect(); horizon + 1],
        }
    }

    fn triangle_env(demand: &[f64]) -> Env {
        let grid = triangle([0.1, 0.2, 0.25]);
        let scenario = flat_scenario(&grid, demand, 5);
        Env::new(Arc::new(grid), Arc::new(scenario), &EnvConfig::default())
    }

    #[test]
    fn reset_gives_reference_topology() {
        let env = triangle_env(&[0.8, 0.6]);
        let s = env.reset().unwrap();
        assert!(s.topo.line_status.iter().all(|&on| on));
        assert!(!s.done && !s.blackout);
        assert!((s.p_gen[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn reset_rejects_demand_above_capacity() {
        let env = triangle_env(&[6.0, 6.0]);
        assert!(matches!(env.reset(), Err(Error::InfeasibleStart { .. })));
    }

    #[test]
    fn do_nothing_reward_is_offset_minus_loss() {
        let env = triangle_env(&[0.8, 0.6]);
        let s = env.reset().unwrap();
        let out = env.step(&s, AgentAction::DoNothing, AdversaryAction::NONE);
        let loss = energy_loss(&env.grid, &out.state.sol);
        assert!((out.reward - (env.reward_offset - loss)).abs() < 1e-15);
        assert!(out.reward > 0.0);
        assert!(!out.done);
    }

    #[test]
    fn attack_is_visible_before_the_agent_acts() {
        let env = triangle_env(&[0.8, 0.6]);
        let s = env.reset().unwrap();
        let mid = env.attack(&s, AdversaryAction::line(2));
        assert!(!mid.topo.line_status[2]);
        assert_eq!(env.observe(&mid)[env.grid.n_lines() + 2], 0.0);
        assert_eq!(mid.sol.flows[2], 0.0);
        // step never mutates its input
        let before = s.clone();
        let _ = env.step(&s, AgentAction::DoNothing, AdversaryAction::line(0));
        assert_eq!(s, before);
    }

    #[test]
    fn cutting_a_radial_feeder_is_a_blackout() {
        let mut grid = triangle([0.1, 0.2, 0.25]);
        grid.substations.push(3);
        grid.lines.push(crate::grid::LineSpec {
            from: 2,
            to: 3,
            reactance: 0.1,
            resistance: 0.01,
            thermal_limit: 2.0,
        });
        grid.loads.push(LoadSpec {
            substation: 3,
            nominal_p: 0.5,
        });
        let scenario = flat_scenario(&grid, &[0.5, 0.5, 0.5], 5);
        let env = Env::new(Arc::new(grid), Arc::new(scenario), &EnvConfig::default());
        let s = env.reset().unwrap();
        let out = env.step(&s, AgentAction::DoNothing, AdversaryAction::line(3));
        assert!(out.done && out.state.blackout);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.blackout, Some(BlackoutCause::IslandedLoad(2)));
        // absorbing afterwards
        let again = env.step(&out.state, AgentAction::DoNothing, AdversaryAction::NONE);
        assert_eq!(again.reward, 0.0);
        assert!(again.done);
    }

    #[test]
    fn redispatch_cost_uses_alpha() {
        let mut grid = triangle([0.1, 0.2, 0.25]);
        grid.generators.push(GeneratorSpec {
            substation: 1,
            p_min: 0.0,
            p_max: 1.0,
            ramp_limit: 0.3,
        });
        let scenario = flat_scenario(&grid, &[0.8, 0.6], 5);
        let env = Env::new(Arc::new(grid), Arc::new(scenario), &EnvConfig::default());
        let prev = env.reset().unwrap();
        let mut cur = prev.clone();
        cur.sol.flows = vec![0.0; 3];
        // loss 0.04 from a single flow of sqrt(0.04 / r)
        cur.sol.flows[0] = (0.04 / env.grid.lines[0].resistance).sqrt();
        assert!((operations_cost(&env.grid, 1.0, &prev, &cur) - 0.04).abs() < 1e-12);
        // the slack's own movement is not redispatch
        cur.p_gen[0] += 0.2;
        assert!((operations_cost(&env.grid, 1.0, &prev, &cur) - 0.04).abs() < 1e-12);
        cur.p_gen[1] -= 0.2;
        assert!((operations_cost(&env.grid, 1.0, &prev, &cur) - 0.24).abs() < 1e-12);
        assert!((operations_cost(&env.grid, 2.0, &prev, &cur) - 0.44).abs() < 1e-12);
    }

    #[test]
    fn observation_has_documented_length() {
        let env = triangle_env(&[0.8, 0.6]);
        let s = env.reset().unwrap();
        let obs = env.observe(&s);
        let g = &env.grid;
        assert_eq!(obs.len(), 2 * g.n_lines() + g.n_substations() + g.n_generators() + g.n_lines() + 1);
        assert_eq!(obs, env.observe(&s.clone()));
    }

    #[test]
    fn illegal_reconnect_degrades_to_no_op() {
        let env = triangle_env(&[0.8, 0.6]);
        let s = env.reset().unwrap();
        let mid = env.attack(&s, AdversaryAction::line(1));
        let out = env.act(&mid, AgentAction::Reconnect(1));
        assert!(matches!(out.illegal, Some(IllegalAction::Cooldown { line: 1, .. })));
        assert!(!out.state.topo.line_status[1]);
        let mask = env.legal_mask(&mid);
        let idx = env
            .actions
            .actions
            .iter()
            .position(|a| *a == AgentAction::Reconnect(1))
            .unwrap();
        assert!(!mask[idx]);
    }

    #[test]
    fn gate_only_allows_no_op_and_reconnect_when_safe() {
        let env = triangle_env(&[0.8, 0.6]);
        let s = env.reset().unwrap();
        let mut mask = env.legal_mask(&s);
        ActionGate {
            danger_threshold: Some(0.95),
        }
        .apply(&env.actions, &s, &mut mask);
        for (m, a) in mask.iter().zip(&env.actions.actions) {
            if *m {
                assert!(matches!(a, AgentAction::DoNothing | AgentAction::Reconnect(_)));
            }
        }
        assert!(mask[0]);
    }
}
