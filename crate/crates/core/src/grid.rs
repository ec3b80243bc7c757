//! Static network description, bus-level topology and the nodal susceptance matrix.
//!
//! Every substation owns two buses. Each element (line origin, line extremity,
//! generator, load) is attached to one of the two buses of its substation, and a
//! line carries flow only while it is switched in. Buses that host nothing are
//! dropped, so the electrical nodes of a topology are the occupied buses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the two busbars of a substation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bus {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Bus {
    pub fn other(self) -> Bus {
        match self {
            Bus::One => Bus::Two,
            Bus::Two => Bus::One,
        }
    }

    fn index(self) -> usize {
        match self {
            Bus::One => 0,
            Bus::Two => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    /// Series reactance, per-unit. Must be strictly positive.
    pub reactance: f64,
    /// Series resistance, per-unit. Only used for the loss estimate.
    pub resistance: f64,
    pub thermal_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub substation: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub ramp_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub substation: usize,
    /// Typical peak demand, per-unit. Only used to synthesize scenarios.
    #[serde(default)]
    pub nominal_p: f64,
}

/// Thermal protection and reconnection rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Loading ratio above which a line trips within the same step.
    pub hard_overflow_ratio: f64,
    /// Consecutive steps above 100% loading after which a line trips.
    pub soft_overflow_steps: u32,
    /// Steps a tripped or attacked line must wait before it can be reconnected.
    pub reconnect_cooldown: u32,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            hard_overflow_ratio: 2.0,
            soft_overflow_steps: 3,
            reconnect_cooldown: 3,
        }
    }
}

/// Grid file contents. Field names match the on-disk JSON format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub substations: Vec<usize>,
    pub lines: Vec<LineSpec>,
    pub generators: Vec<GeneratorSpec>,
    pub loads: Vec<LoadSpec>,
    /// Substation of the slack generator.
    pub slack: usize,
    pub attackable_lines: Vec<usize>,
    #[serde(default)]
    pub cascade: CascadeConfig,
}

/// An element that can be assigned to a bus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Element {
    LineOrigin(usize),
    LineExtremity(usize),
    Generator(usize),
    Load(usize),
}

impl GridSpec {
    pub fn from_json(text: &str) -> std::result::Result<GridSpec, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads a grid file and checks its invariants.
    pub fn load(path: &Path) -> Result<GridSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid = Self::from_json(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    /// One of the grids shipped with the crate: `"toy5"` or `"desk14"`.
    pub fn bundled(name: &str) -> Option<GridSpec> {
        let text = match name {
            "toy5" => include_str!("../data/grids/toy5.json"),
            "desk14" => include_str!("../data/grids/desk14.json"),
            _ => return None,
        };
        Some(Self::from_json(text).expect("bundled grid parses"))
    }

    pub fn bundled_names() -> &'static [&'static str] {
        &["toy5", "desk14"]
    }

    pub fn n_substations(&self) -> usize {
        self.substations.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn n_loads(&self) -> usize {
        self.loads.len()
    }

    /// Index of the slack generator. Only meaningful on a validated grid.
    pub fn slack_generator(&self) -> usize {
        self.generators
            .iter()
            .position(|g| g.substation == self.slack)
            .expect("validated grid has a slack generator")
    }

    pub fn n_elements(&self) -> usize {
        2 * self.n_lines() + self.n_generators() + self.n_loads()
    }

    /// Element by flat index: line origins, line extremities, generators, loads.
    pub fn element(&self, index: usize) -> Option<Element> {
        let l = self.n_lines();
        let g = self.n_generators();
        let d = self.n_loads();
        match index {
            i if i < l => Some(Element::LineOrigin(i)),
            i if i < 2 * l => Some(Element::LineExtremity(i - l)),
            i if i < 2 * l + g => Some(Element::Generator(i - 2 * l)),
            i if i < 2 * l + g + d => Some(Element::Load(i - 2 * l - g)),
            _ => None,
        }
    }

    pub fn element_substation(&self, element: Element) -> usize {
        match element {
            Element::LineOrigin(l) => self.lines[l].from,
            Element::LineExtremity(l) => self.lines[l].to,
            Element::Generator(g) => self.generators[g].substation,
            Element::Load(d) => self.loads[d].substation,
        }
    }

    /// Upper bound on the per-step operations cost, used as the reward offset.
    pub fn reward_offset(&self, alpha: f64) -> f64 {
        let loss: f64 = self
            .lines
            .iter()
            .map(|l| l.resistance * l.thermal_limit * l.thermal_limit)
            .sum();
        let ramp: f64 = self.generators.iter().map(|g| g.ramp_limit).sum();
        loss + alpha * ramp
    }

    /// Checks every structural invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n = self.n_substations();
        for (i, &id) in self.substations.iter().enumerate() {
            if id != i {
                problems.push(format!(
                    "substations must be numbered 0..{n} in order; position {i} holds id {id}"
                ));
            }
        }
        if !(self.base_mva > 0.0) {
            problems.push(format!("base_mva must be positive, got {}", self.base_mva));
        }
        for (i, line) in self.lines.iter().enumerate() {
            if line.from >= n || line.to >= n {
                problems.push(format!(
                    "line {i}: endpoint substation out of range ({} -> {})",
                    line.from, line.to
                ));
            }
            if line.from == line.to {
                problems.push(format!("line {i}: both ends at substation {}", line.from));
            }
            if !(line.reactance > 0.0) || !line.reactance.is_finite() {
                problems.push(format!(
                    "line {i}: reactance must be > 0, got {}",
                    line.reactance
                ));
            }
            if !(line.resistance >= 0.0) || !line.resistance.is_finite() {
                problems.push(format!(
                    "line {i}: resistance must be >= 0, got {}",
                    line.resistance
                ));
            }
            if !(line.thermal_limit > 0.0) || !line.thermal_limit.is_finite() {
                problems.push(format!(
                    "line {i}: thermal_limit must be > 0, got {}",
                    line.thermal_limit
                ));
            }
        }
        for (i, gen) in self.generators.iter().enumerate() {
            if gen.substation >= n {
                problems.push(format!(
                    "generator {i}: substation {} out of range",
                    gen.substation
                ));
            }
            if !(gen.p_min <= gen.p_max) {
                problems.push(format!(
                    "generator {i}: p_min {} exceeds p_max {}",
                    gen.p_min, gen.p_max
                ));
            }
            if !(gen.ramp_limit >= 0.0) {
                problems.push(format!(
                    "generator {i}: ramp_limit must be >= 0, got {}",
                    gen.ramp_limit
                ));
            }
        }
        for (i, load) in self.loads.iter().enumerate() {
            if load.substation >= n {
                problems.push(format!(
                    "load {i}: substation {} out of range",
                    load.substation
                ));
            }
        }
        let slack_gens = self
            .generators
            .iter()
            .filter(|g| g.substation == self.slack)
            .count();
        if slack_gens != 1 {
            problems.push(format!(
                "slack substation {} must host exactly one generator, found {slack_gens}",
                self.slack
            ));
        }
        let mut seen = vec![false; self.n_lines()];
        for &l in &self.attackable_lines {
            if l >= self.n_lines() {
                problems.push(format!("attackable line {l} does not exist"));
            } else if std::mem::replace(&mut seen[l], true) {
                problems.push(format!("attackable line {l} listed twice"));
            }
        }
        if self.cascade.hard_overflow_ratio <= 1.0 {
            problems.push(format!(
                "cascade.hard_overflow_ratio must exceed 1, got {}",
                self.cascade.hard_overflow_ratio
            ));
        }
        if self.cascade.soft_overflow_steps == 0 {
            problems.push("cascade.soft_overflow_steps must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGrid(problems))
        }
    }
}

/// Switching state of the network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub line_status: Vec<bool>,
    pub origin_bus: Vec<Bus>,
    pub extremity_bus: Vec<Bus>,
    pub generator_bus: Vec<Bus>,
    pub load_bus: Vec<Bus>,
    pub cooldowns: Vec<u32>,
}

impl Topology {
    /// All lines in service, every element on bus 1.
    pub fn reference(grid: &GridSpec) -> Topology {
        Topology {
            line_status: vec![true; grid.n_lines()],
            origin_bus: vec![Bus::One; grid.n_lines()],
            extremity_bus: vec![Bus::One; grid.n_lines()],
            generator_bus: vec![Bus::One; grid.n_generators()],
            load_bus: vec![Bus::One; grid.n_loads()],
            cooldowns: vec![0; grid.n_lines()],
        }
    }

    pub fn bus_of(&self, element: Element) -> Bus {
        match element {
            Element::LineOrigin(l) => self.origin_bus[l],
            Element::LineExtremity(l) => self.extremity_bus[l],
            Element::Generator(g) => self.generator_bus[g],
            Element::Load(d) => self.load_bus[d],
        }
    }

    fn bus_mut(&mut self, element: Element) -> &mut Bus {
        match element {
            Element::LineOrigin(l) => &mut self.origin_bus[l],
            Element::LineExtremity(l) => &mut self.extremity_bus[l],
            Element::Generator(g) => &mut self.generator_bus[g],
            Element::Load(d) => &mut self.load_bus[d],
        }
    }

    /// Takes a line out of service and starts its reconnection cooldown.
    pub fn disconnect(&mut self, line: usize, cooldown: u32) {
        self.line_status[line] = false;
        self.cooldowns[line] = cooldown;
    }

    pub fn tick_cooldowns(&mut self) {
        for c in &mut self.cooldowns {
            *c = c.saturating_sub(1);
        }
    }

    pub fn connected_lines(&self) -> impl Iterator<Item = usize> + '_ {
        self.line_status
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TopologyAction {
    NoOp,
    /// Moves one element to the other bus of its substation.
    ChangeBus(Element),
    /// Switches a disconnected line back in on its stored buses.
    Reconnect(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum IllegalAction {
    #[error("line {line} is still cooling down ({remaining} steps left)")]
    Cooldown { line: usize, remaining: u32 },
    #[error("line {0} is already connected")]
    AlreadyConnected(usize),
    #[error("substation {0} has no line in service")]
    IsolatedSubstation(usize),
    #[error("element {0:?} does not exist")]
    UnknownElement(Element),
}

/// Applies one topology action. Illegal actions leave the topology untouched.
pub fn apply_topology_action(
    grid: &GridSpec,
    topo: &Topology,
    action: TopologyAction,
) -> std::result::Result<Topology, IllegalAction> {
    match action {
        TopologyAction::NoOp => Ok(topo.clone()),
        TopologyAction::Reconnect(line) => {
            if line >= grid.n_lines() {
                return Err(IllegalAction::UnknownElement(Element::LineOrigin(line)));
            }
            if topo.line_status[line] {
                return Err(IllegalAction::AlreadyConnected(line));
            }
            if topo.cooldowns[line] > 0 {
                return Err(IllegalAction::Cooldown {
                    line,
                    remaining: topo.cooldowns[line],
                });
            }
            let mut next = topo.clone();
            next.line_status[line] = true;
            Ok(next)
        }
        TopologyAction::ChangeBus(element) => {
            let exists = match element {
                Element::LineOrigin(l) | Element::LineExtremity(l) => l < grid.n_lines(),
                Element::Generator(g) => g < grid.n_generators(),
                Element::Load(d) => d < grid.n_loads(),
            };
            if !exists {
                return Err(IllegalAction::UnknownElement(element));
            }
            let sub = grid.element_substation(element);
            if substation_isolated(grid, topo, sub) {
                return Err(IllegalAction::IsolatedSubstation(sub));
            }
            let mut next = topo.clone();
            let bus = next.bus_mut(element);
            *bus = bus.other();
            Ok(next)
        }
    }
}

pub fn substation_isolated(grid: &GridSpec, topo: &Topology, sub: usize) -> bool {
    !grid
        .lines
        .iter()
        .enumerate()
        .any(|(i, l)| topo.line_status[i] && (l.from == sub || l.to == sub))
}

/// Mapping between occupied buses and dense node indices.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMap {
    /// `(substation, bus)` of each node, sorted.
    pub nodes: Vec<(usize, Bus)>,
    index: Vec<[Option<usize>; 2]>,
}

impl NodeMap {
    /// A bus is occupied when it hosts a generator, a load or an in-service line end.
    pub fn new(grid: &GridSpec, topo: &Topology) -> NodeMap {
        let mut occupied = vec![[false; 2]; grid.n_substations()];
        for (i, line) in grid.lines.iter().enumerate() {
            if topo.line_status[i] {
                occupied[line.from][topo.origin_bus[i].index()] = true;
                occupied[line.to][topo.extremity_bus[i].index()] = true;
            }
        }
        for (g, gen) in grid.generators.iter().enumerate() {
            occupied[gen.substation][topo.generator_bus[g].index()] = true;
        }
        for (d, load) in grid.loads.iter().enumerate() {
            occupied[load.substation][topo.load_bus[d].index()] = true;
        }
        let mut nodes = Vec::new();
        let mut index = vec![[None; 2]; grid.n_substations()];
        for (sub, occ) in occupied.iter().enumerate() {
            for bus in [Bus::One, Bus::Two] {
                if occ[bus.index()] {
                    index[sub][bus.index()] = Some(nodes.len());
                    nodes.push((sub, bus));
                }
            }
        }
        NodeMap { nodes, index }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, sub: usize, bus: Bus) -> Option<usize> {
        self.index.get(sub).and_then(|b| b[bus.index()])
    }

    /// Node of an element under `topo`.
    pub fn node_of(&self, grid: &GridSpec, topo: &Topology, element: Element) -> Option<usize> {
        self.node(grid.element_substation(element), topo.bus_of(element))
    }

    /// End nodes of an in-service line.
    pub fn line_nodes(&self, grid: &GridSpec, topo: &Topology, line: usize) -> Option<(usize, usize)> {
        if !topo.line_status[line] {
            return None;
        }
        let from = self.node_of(grid, topo, Element::LineOrigin(line))?;
        let to = self.node_of(grid, topo, Element::LineExtremity(line))?;
        Some((from, to))
    }
}

/// Dense symmetric nodal susceptance matrix over the occupied buses.
#[derive(Clone, Debug, PartialEq)]
pub struct SusceptanceMatrix {
    pub nodes: NodeMap,
    /// Row-major `n x n` entries.
    pub values: Vec<f64>,
}

impl SusceptanceMatrix {
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.values[i * n..(i + 1) * n]
    }
}

pub fn build_susceptance(grid: &GridSpec, topo: &Topology) -> SusceptanceMatrix {
    let nodes = NodeMap::new(grid, topo);
    let n = nodes.len();
    let mut values = vec![0.0; n * n];
    for (l, line) in grid.lines.iter().enumerate() {
        let Some((i, j)) = nodes.line_nodes(grid, topo, l) else {
            continue;
        };
        if i == j {
            continue;
        }
        let b = 1.0 / line.reactance;
        values[i * n + i] += b;
        values[j * n + j] += b;
        values[i * n + j] -= b;
        values[j * n + i] -= b;
    }
    SusceptanceMatrix { nodes, values }
}

/// Electrical islands of a topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub nodes: NodeMap,
    /// Component label of each node, numbered in order of first appearance.
    pub component: Vec<usize>,
    pub count: usize,
    /// Component holding the slack generator, if it is attached anywhere.
    pub main: Option<usize>,
}

impl Components {
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.component.len())
            .filter(|&n| self.component[n] == c)
            .collect()
    }

    pub fn in_main(&self, node: usize) -> bool {
        self.main == Some(self.component[node])
    }
}

pub fn connected_components(grid: &GridSpec, topo: &Topology) -> Components {
    let nodes = NodeMap::new(grid, topo);
    let n = nodes.len();
    let mut adjacency = vec![Vec::new(); n];
    for l in 0..grid.n_lines() {
        if let Some((i, j)) = nodes.line_nodes(grid, topo, l) {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    let mut component = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        component[start] = count;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for &v in &adjacency[u] {
                if component[v] == usize::MAX {
                    component[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    let slack = grid.slack_generator();
    let main = nodes
        .node_of(grid, topo, Element::Generator(slack))
        .map(|node| component[node]);
    Components {
        nodes,
        component,
        count,
        main,
    }
}
