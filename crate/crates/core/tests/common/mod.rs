//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Nothing here calls into the code it checks
//! except to obtain inputs.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use gridguard::adversary::{random_adversary, weighted_random_adversary, FlowWeights};
use gridguard::env::{AdversaryAction, AgentAction, Env, EnvConfig, GridState};
use gridguard::grid::{
    build_susceptance, Bus, CascadeConfig, GeneratorSpec, GridSpec, LineSpec, LoadSpec, Topology,
};
use gridguard::nn::PolicyParams;
use gridguard::policy::masked_log_softmax;
use gridguard::powerflow::{solve_dc, Injections};
use gridguard::ppo::{ppo_gradients, ppo_loss, Batch, TrainConfig};
use gridguard::scenario::{load_scenarios, Scenario, ScenarioProfile};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Bundled data, reachable from either crate's manifest directory.
pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data")
}

pub fn bundled_scenarios(grid: &GridSpec, split: &str) -> Vec<Scenario> {
    load_scenarios(&data_dir().join("scenarios").join(&grid.name).join(split), grid).unwrap()
}

pub fn bundled_envs(grid: &str, split: &str) -> Vec<Env> {
    let grid = Arc::new(GridSpec::bundled(grid).unwrap());
    bundled_scenarios(&grid, split)
        .into_iter()
        .map(|s| Env::new(grid.clone(), Arc::new(s), &EnvConfig::default()))
        .collect()
}

// ---------------------------------------------------------------------------
// DC power flow

type Key = (usize, usize);

fn bus(b: Bus) -> usize {
    match b {
        Bus::One => 0,
        Bus::Two => 1,
    }
}

fn line_keys(grid: &GridSpec, topo: &Topology, l: usize) -> (Key, Key) {
    let line = &grid.lines[l];
    ((line.from, bus(topo.origin_bus[l])), (line.to, bus(topo.extremity_bus[l])))
}

/// Buses carrying at least one element, as `(substation, bus)`.
pub fn occupied(grid: &GridSpec, topo: &Topology) -> Vec<Key> {
    let mut keys = Vec::new();
    for l in 0..grid.n_lines() {
        if topo.line_status[l] {
            let (a, b) = line_keys(grid, topo, l);
            keys.push(a);
            keys.push(b);
        }
    }
    for (g, gen) in grid.generators.iter().enumerate() {
        keys.push((gen.substation, bus(topo.generator_bus[g])));
    }
    for (d, load) in grid.loads.iter().enumerate() {
        keys.push((load.substation, bus(topo.load_bus[d])));
    }
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Buses reachable from `root` through in-service lines.
pub fn island(grid: &GridSpec, topo: &Topology, root: Key) -> Vec<Key> {
    let mut seen = vec![root];
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for l in 0..grid.n_lines() {
            if !topo.line_status[l] {
                continue;
            }
            let (a, b) = line_keys(grid, topo, l);
            let next = if a == u {
                b
            } else if b == u {
                a
            } else {
                continue;
            };
            if !seen.contains(&next) {
                seen.push(next);
                queue.push_back(next);
            }
        }
    }
    seen.sort_unstable();
    seen
}

pub struct DcReference {
    pub theta: BTreeMap<Key, f64>,
    pub flows: Vec<f64>,
}

/// Dense LU solve of the reduced nodal equations on the slack's island.
pub fn reference_dc(grid: &GridSpec, topo: &Topology, injections: &BTreeMap<Key, f64>, slack: Key) -> Option<DcReference> {
    let nodes: Vec<Key> = island(grid, topo, slack).into_iter().filter(|&k| k != slack).collect();
    let index = |k: Key| nodes.iter().position(|&n| n == k);
    let n = nodes.len();
    let mut b = DMatrix::<f64>::zeros(n, n);
    for l in 0..grid.n_lines() {
        if !topo.line_status[l] {
            continue;
        }
        let (u, v) = line_keys(grid, topo, l);
        if u == v {
            continue;
        }
        let y = 1.0 / grid.lines[l].reactance;
        let (iu, iv) = (index(u), index(v));
        if let Some(i) = iu {
            b[(i, i)] += y;
        }
        if let Some(j) = iv {
            b[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (iu, iv) {
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
    }
    let p = DVector::from_iterator(n, nodes.iter().map(|k| injections.get(k).copied().unwrap_or(0.0)));
    let x = if n == 0 { DVector::zeros(0) } else { b.lu().solve(&p)? };
    let mut theta: BTreeMap<Key, f64> = occupied(grid, topo).into_iter().map(|k| (k, 0.0)).collect();
    for (i, k) in nodes.iter().enumerate() {
        theta.insert(*k, x[i]);
    }
    let flows = (0..grid.n_lines())
        .map(|l| {
            if !topo.line_status[l] {
                return 0.0;
            }
            let (u, v) = line_keys(grid, topo, l);
            (theta[&u] - theta[&v]) / grid.lines[l].reactance
        })
        .collect();
    Some(DcReference { theta, flows })
}

fn line(from: usize, to: usize, reactance: f64, thermal_limit: f64) -> LineSpec {
    LineSpec {
        from,
        to,
        reactance,
        resistance: 0.1 * reactance,
        thermal_limit,
    }
}

/// Connected random network: a random spanning tree plus a few chords.
pub fn random_grid(rng: &mut impl Rng, substations: usize) -> GridSpec {
    let mut lines = Vec::new();
    for s in 1..substations {
        let parent = rng.gen_range(0..s);
        lines.push(line(parent, s, rng.gen_range(0.05..0.5), rng.gen_range(0.3..1.5)));
    }
    for _ in 0..rng.gen_range(0..=substations) {
        let a = rng.gen_range(0..substations);
        let b = rng.gen_range(0..substations);
        if a != b {
            lines.push(line(a, b, rng.gen_range(0.05..0.5), rng.gen_range(0.3..1.5)));
        }
    }
    let mut loads = Vec::new();
    for s in 1..substations {
        if rng.gen_bool(0.7) {
            loads.push(LoadSpec {
                substation: s,
                nominal_p: rng.gen_range(0.1..0.6),
            });
        }
    }
    let loads = if loads.is_empty() {
        vec![LoadSpec {
            substation: substations - 1,
            nominal_p: 0.3,
        }]
    } else {
        loads
    };
    let demand: f64 = loads.iter().map(|l| l.nominal_p).sum();
    let mut generators = vec![GeneratorSpec {
        substation: 0,
        p_min: 0.0,
        p_max: demand * rng.gen_range(0.8..1.6),
        ramp_limit: 0.1,
    }];
    if substations > 2 {
        generators.push(GeneratorSpec {
            substation: rng.gen_range(1..substations),
            p_min: 0.0,
            p_max: demand * rng.gen_range(0.3..1.0),
            ramp_limit: 0.1,
        });
    }
    GridSpec {
        name: "random".into(),
        base_mva: 100.0,
        substations: (0..substations).collect(),
        attackable_lines: (0..lines.len()).collect(),
        lines,
        generators,
        loads,
        slack: 0,
        cascade: CascadeConfig::default(),
    }
}

/// Random outages and bus assignments on top of the reference topology.
pub fn random_topology(rng: &mut impl Rng, grid: &GridSpec) -> Topology {
    let mut topo = Topology::reference(grid);
    let mut flip = |b: &mut Bus| {
        if rng.gen_bool(0.2) {
            *b = Bus::Two;
        }
    };
    topo.origin_bus.iter_mut().for_each(&mut flip);
    topo.extremity_bus.iter_mut().for_each(&mut flip);
    topo.generator_bus.iter_mut().for_each(&mut flip);
    topo.load_bus.iter_mut().for_each(&mut flip);
    for s in topo.line_status.iter_mut() {
        if rng.gen_bool(0.15) {
            *s = false;
        }
    }
    topo
}

pub struct DcCheck {
    pub max_abs_error: f64,
    pub max_balance_error: f64,
    pub nodes: usize,
}

/// One random (topology, injection) case with at most `max_nodes` electrical
/// nodes, compared against [`reference_dc`].
pub fn dc_case(rng: &mut impl Rng, max_nodes: usize) -> DcCheck {
    loop {
        let size = rng.gen_range(2..=max_nodes.min(10));
        let grid = random_grid(rng, size);
        let topo = random_topology(rng, &grid);
        let keys = occupied(&grid, &topo);
        if keys.len() > max_nodes {
            continue;
        }
        let slack = (grid.generators[0].substation, bus(topo.generator_bus[0]));
        let live = island(&grid, &topo, slack);
        let mut inj: BTreeMap<Key, f64> = BTreeMap::new();
        let mut total = 0.0;
        for &k in &live {
            if k != slack {
                let p = rng.gen_range(-1.0..1.0);
                inj.insert(k, p);
                total += p;
            }
        }
        inj.insert(slack, -total);

        let matrix = build_susceptance(&grid, &topo);
        let p: Vec<f64> = matrix
            .nodes
            .nodes
            .iter()
            .map(|&(s, b)| inj.get(&(s, bus(b))).copied().unwrap_or(0.0))
            .collect();
        let slack_node = matrix.nodes.nodes.iter().position(|&(s, b)| (s, bus(b)) == slack).unwrap();
        let got = solve_dc(&grid, &topo, &matrix, &Injections { p: p.clone() }, slack_node).expect("solvable case");
        let want = reference_dc(&grid, &topo, &inj, slack).expect("reference solve");

        let mut err: f64 = 0.0;
        for (l, f) in got.flows.iter().enumerate() {
            err = err.max((f - want.flows[l]).abs());
        }
        for (i, &(s, b)) in matrix.nodes.nodes.iter().enumerate() {
            err = err.max((got.theta[i] - want.theta[&(s, bus(b))]).abs());
        }
        // Kirchhoff: what leaves each node equals what is injected there.
        let mut balance: f64 = 0.0;
        for (i, &(s, b)) in matrix.nodes.nodes.iter().enumerate() {
            let key = (s, bus(b));
            let mut out = 0.0;
            for l in 0..grid.n_lines() {
                if !topo.line_status[l] {
                    continue;
                }
                let (u, v) = line_keys(&grid, &topo, l);
                if u == key {
                    out += got.flows[l];
                }
                if v == key {
                    out -= got.flows[l];
                }
            }
            balance = balance.max((out - p[i]).abs());
        }
        return DcCheck {
            max_abs_error: err,
            max_balance_error: balance,
            nodes: keys.len(),
        };
    }
}

// ---------------------------------------------------------------------------
// Gradient check

/// Relative error `|g_a - g_fd| / max(|g_a|, |g_fd|)` between the analytic
/// loss gradient and central differences, on a random network and batch.
pub fn gradient_check_trial(rng: &mut impl Rng, h: f64) -> f64 {
    let obs_len = rng.gen_range(2..=5);
    let actions = rng.gen_range(2..=5);
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=6)).collect();
    let cfg = TrainConfig {
        entropy_coef: 0.01,
        value_coef: 0.5,
        ..TrainConfig::default()
    };
    let mut params = PolicyParams::new(obs_len, &hidden, actions, rng);
    // Fresh layers have zero bias, which parks units fed only by dead ReLUs
    // exactly on the kink; random biases keep every point differentiable.
    for layer in params.actor.layers.iter_mut().chain(params.critic.layers.iter_mut()) {
        layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
    }
    let mut batch = Batch::default();
    for _ in 0..rng.gen_range(4..=10) {
        let obs: Vec<f64> = (0..obs_len).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let action = rng.gen_range(0..actions);
        let mut mask: Vec<bool> = (0..actions).map(|_| rng.gen_bool(0.7)).collect();
        mask[action] = true;
        if mask.iter().filter(|&&m| m).count() < 2 {
            mask[(action + 1) % actions] = true;
        }
        let (logits, _) = params.forward(&obs).unwrap();
        let logp = masked_log_softmax(&logits, &mask).unwrap()[action];
        // Old log-probabilities put the ratio on either side of the clip
        // interval, away from its kinks.
        let (lo, hi) = cfg.clip_range;
        let ratio = match rng.gen_range(0..3) {
            0 => rng.gen_range(lo - 0.05..lo - 0.005),
            1 => rng.gen_range(lo + 0.005..hi - 0.005),
            _ => rng.gen_range(hi + 0.005..hi + 0.05),
        };
        batch.obs.push(obs);
        batch.masks.push(mask);
        batch.actions.push(action);
        batch.old_log_probs.push(logp - ratio.ln());
        batch.advantages.push(rng.gen_range(-1.0..1.0));
        batch.returns.push(rng.gen_range(-1.0..1.0));
    }

    let (grads, _) = ppo_gradients(&params, &batch, &cfg).unwrap();
    let analytic: Vec<f64> = grads.actor.params().chain(grads.critic.params()).copied().collect();
    let count = analytic.len();
    let mut numeric = Vec::with_capacity(count);
    for k in 0..count {
        let loss_at = |delta: f64| {
            let mut p = params.clone();
            let slot = p.actor.params_mut().chain(p.critic.params_mut()).nth(k).unwrap();
            *slot += delta;
            ppo_loss(&p, &batch, &cfg).unwrap().total
        };
        numeric.push((loss_at(h) - loss_at(-h)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// Goodness of fit

/// 99th percentiles of the chi-square distribution for 1..=30 degrees of freedom.
const CHI2_99: [f64; 30] = [
    6.6349, 9.2103, 11.3449, 13.2767, 15.0863, 16.8119, 18.4753, 20.0902, 21.6660, 23.2093, 24.7250, 26.2170,
    27.6882, 29.1412, 30.5779, 31.9999, 33.4087, 34.8053, 36.1909, 37.5662, 38.9322, 40.2894, 41.6384, 42.9798,
    44.3141, 45.6417, 46.9629, 48.2782, 49.5879, 50.8922,
];

pub struct FitResult {
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    /// Draws that landed on a zero-probability category.
    pub impossible: usize,
}

impl FitResult {
    /// `p > 0.01`.
    pub fn accepted(&self) -> bool {
        self.impossible == 0 && self.statistic < self.critical
    }
}

pub fn chi_square(counts: &[usize], probs: &[f64]) -> FitResult {
    let n: usize = counts.iter().sum();
    let mut statistic = 0.0;
    let mut categories = 0;
    let mut impossible = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p == 0.0 {
            impossible += c;
            continue;
        }
        let e = p * n as f64;
        statistic += (c as f64 - e).powi(2) / e;
        categories += 1;
    }
    let dof = categories - 1;
    FitResult {
        statistic,
        dof,
        critical: CHI2_99[dof - 1],
        impossible,
    }
}

/// Draw frequencies of the uniform and flow-weighted attackers on a state
/// with some lines already out, against their target distributions.
pub fn attacker_fits(rng: &mut impl Rng, draws: usize) -> (FitResult, FitResult) {
    let env = &bundled_envs("desk14", "test")[0];
    let mut state: GridState = env.reset().unwrap();
    for _ in 0..20 {
        state = env.step(&state, AgentAction::DoNothing, AdversaryAction::NONE).state;
    }
    let lines: Vec<usize> = (0..env.grid.n_lines()).collect();
    // Two lines out of service: neither attacker may pick them.
    state.topo.line_status[0] = false;
    state.topo.line_status[7] = false;

    let live: Vec<usize> = lines.iter().copied().filter(|&l| state.topo.line_status[l]).collect();
    let mut uniform = vec![0usize; lines.len()];
    let mut weighted = vec![0usize; lines.len()];
    for _ in 0..draws {
        uniform[random_adversary(&state, &lines, rng).target.unwrap()] += 1;
        weighted[weighted_random_adversary(&env.grid, &state, &lines, FlowWeights::RunningMax, rng)
            .target
            .unwrap()] += 1;
    }
    let p_uniform: Vec<f64> = lines
        .iter()
        .map(|l| if live.contains(l) { 1.0 / live.len() as f64 } else { 0.0 })
        .collect();
    let total: f64 = live.iter().map(|&l| state.max_flow[l]).sum();
    let p_weighted: Vec<f64> = lines
        .iter()
        .map(|&l| if live.contains(&l) { state.max_flow[l] / total } else { 0.0 })
        .collect();
    (chi_square(&uniform, &p_uniform), chi_square(&weighted, &p_weighted))
}

// ---------------------------------------------------------------------------
// Reward fuzzing

#[derive(Debug, Default)]
pub struct FuzzSummary {
    pub episodes: usize,
    pub steps: usize,
    pub blackout_steps: usize,
    /// Blackout steps whose reward was not exactly zero.
    pub nonzero_blackout_rewards: usize,
    /// Normal-operation steps whose reward was not strictly positive.
    pub nonpositive_normal_rewards: usize,
}

/// Random legal operator moves and random line cuts on the bundled grids.
pub fn reward_fuzz(rng: &mut impl Rng, episodes: usize, horizon: usize) -> FuzzSummary {
    let envs: Vec<Env> = ["toy5", "desk14"]
        .iter()
        .flat_map(|g| bundled_envs(g, "train"))
        .collect();
    let mut summary = FuzzSummary::default();
    for e in 0..episodes {
        let env = &envs[e % envs.len()];
        let cut_rate = rng.gen_range(0.0..0.1);
        let mut state = env.reset().unwrap();
        while !state.done && state.t < horizon {
            let mask = env.legal_mask(&state);
            let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let action = env.actions.get(legal[rng.gen_range(0..legal.len())]);
            let attack = if rng.gen_bool(cut_rate) {
                AdversaryAction::line(rng.gen_range(0..env.grid.n_lines()))
            } else {
                AdversaryAction::NONE
            };
            let out = env.step(&state, action, attack);
            summary.steps += 1;
            if out.state.blackout {
                summary.blackout_steps += 1;
                if out.reward != 0.0 {
                    summary.nonzero_blackout_rewards += 1;
                }
            } else if !(out.reward > 0.0) {
                summary.nonpositive_normal_rewards += 1;
            }
            state = out.state;
        }
        summary.episodes += 1;
    }
    summary
}

// ---------------------------------------------------------------------------
// Immediate-blackout screening by brute force

const TOL: f64 = 1e-9;

/// Whether `(topo, p_gen, p_load)` is a blackout, re-derived from scratch:
/// a loaded bus cut off from the slack, or a slack outside its limits.
/// Returns the loading of every line when the grid survives.
fn reference_operating_point(grid: &GridSpec, topo: &Topology, p_gen: &[f64], p_load: &[f64]) -> Option<Vec<f64>> {
    let slack_gen = grid.generators.iter().position(|g| g.substation == grid.slack).unwrap();
    let slack = (grid.slack, bus(topo.generator_bus[slack_gen]));
    let live = island(grid, topo, slack);
    let mut inj: BTreeMap<Key, f64> = BTreeMap::new();
    let mut served = 0.0;
    let mut produced = 0.0;
    for (d, load) in grid.loads.iter().enumerate() {
        let k = (load.substation, bus(topo.load_bus[d]));
        if live.contains(&k) {
            *inj.entry(k).or_default() -= p_load[d];
            served += p_load[d];
        } else if p_load[d] > 0.0 {
            return None;
        }
    }
    for (g, gen) in grid.generators.iter().enumerate() {
        let k = (gen.substation, bus(topo.generator_bus[g]));
        if g != slack_gen && live.contains(&k) {
            *inj.entry(k).or_default() += p_gen[g];
            produced += p_gen[g];
        }
    }
    let slack_out = served - produced;
    let spec = &grid.generators[slack_gen];
    if slack_out > spec.p_max + TOL || slack_out < spec.p_min - TOL {
        return None;
    }
    *inj.entry(slack).or_default() += slack_out;
    let sol = reference_dc(grid, topo, &inj, slack)?;
    Some(
        sol.flows
            .iter()
            .zip(&grid.lines)
            .map(|(f, l)| f.abs() / l.thermal_limit)
            .collect(),
    )
}

/// Cuts every line in turn one step into every scenario, lets the operator
/// do nothing, and applies one round of thermal protection by hand.
pub fn brute_force_screen(grid: &GridSpec, scenarios: &[Scenario]) -> Vec<usize> {
    let shared = Arc::new(grid.clone());
    let mut hit = vec![false; grid.n_lines()];
    for scenario in scenarios {
        let env = Env::new(shared.clone(), Arc::new(scenario.clone()), &EnvConfig::default());
        let Ok(start) = env.reset() else { continue };
        let first = env.step(&start, AgentAction::DoNothing, AdversaryAction::NONE);
        if first.done {
            continue;
        }
        let s = &first.state;
        for l in 0..grid.n_lines() {
            let mut topo = s.topo.clone();
            if !topo.line_status[l] {
                continue;
            }
            topo.line_status[l] = false;
            let p_load = &scenario.loads[s.t + 1];
            // Non-slack setpoints are capped by this step's availability.
            let p_gen: Vec<f64> = s
                .p_gen
                .iter()
                .zip(grid.generators.iter().zip(&scenario.gen_max[s.t + 1]))
                .map(|(&p, (g, &avail))| p.min(g.p_max.min(avail)))
                .collect();
            let blackout = match reference_operating_point(grid, &topo, &p_gen, p_load) {
                None => true,
                Some(loading) => {
                    let rules = &grid.cascade;
                    let mut tripped = false;
                    for m in 0..grid.n_lines() {
                        if !topo.line_status[m] {
                            continue;
                        }
                        let counter = s.overflow.counters[m] + 1;
                        if loading[m] > rules.hard_overflow_ratio
                            || (loading[m] > 1.0 && counter >= rules.soft_overflow_steps)
                        {
                            topo.line_status[m] = false;
                            tripped = true;
                        }
                    }
                    tripped && reference_operating_point(grid, &topo, &p_gen, p_load).is_none()
                }
            };
            hit[l] |= blackout;
        }
    }
    (0..grid.n_lines()).filter(|&l| hit[l]).collect()
}

/// Random grids with scenarios, for screening beyond the bundled files.
pub fn random_screening_case(rng: &mut impl Rng) -> (GridSpec, Vec<Scenario>) {
    let size = rng.gen_range(3..=8);
    let grid = random_grid(rng, size);
    let profile = ScenarioProfile {
        horizon: 4,
        ..ScenarioProfile::default()
    };
    let scenarios = (0..3).map(|i| profile.generate(&grid, &format!("r{i}"), rng.gen())).collect();
    (grid, scenarios)
}
