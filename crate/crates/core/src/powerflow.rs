//! DC power flow, loss estimate and thermal-overflow protection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, SusceptanceMatrix, Topology};

const PIVOT_TOLERANCE: f64 = 1e-12;
const ISLAND_INJECTION_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum PowerFlowError {
    #[error("node {node} carries {injection} p.u. but is not connected to the slack")]
    IslandedInjection { node: usize, injection: f64 },
    #[error("singular susceptance system")]
    Singular,
    #[error("slack node {0} out of range")]
    BadSlack(usize),
}

/// Real power injection per electrical node, `p_i = p_G,i - p_D,i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Injections {
    pub p: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    /// Voltage angle per node, radians. The slack is the reference.
    pub theta: Vec<f64>,
    /// Real flow per line from origin to extremity. Zero when out of service.
    pub flows: Vec<f64>,
    /// `|flow| / thermal_limit` per line.
    pub loading: Vec<f64>,
}

impl FlowSolution {
    pub fn zero(grid: &GridSpec, nodes: usize) -> FlowSolution {
        FlowSolution {
            theta: vec![0.0; nodes],
            flows: vec![0.0; grid.n_lines()],
            loading: vec![0.0; grid.n_lines()],
        }
    }

    pub fn max_loading(&self) -> f64 {
        self.loading.iter().copied().fold(0.0, f64::max)
    }
}

/// Solves `B theta = p` on the island of `slack`, with `theta_slack = 0`.
///
/// The slack row is dropped, so the slack absorbs whatever imbalance the
/// injections carry. Nodes outside the slack island get angle zero and must
/// have no injection.
pub fn solve_angles(
    matrix: &SusceptanceMatrix,
    injections: &Injections,
    slack: usize,
) -> Result<Vec<f64>, PowerFlowError> {
    let n = matrix.dim();
    if slack >= n {
        return Err(PowerFlowError::BadSlack(slack));
    }
    assert_eq!(injections.p.len(), n, "one injection per node");

    let mut reached = vec![false; n];
    reached[slack] = true;
    let mut stack = vec![slack];
    while let Some(u) = stack.pop() {
        for (v, &b) in matrix.row(u).iter().enumerate() {
            if v != u && b != 0.0 && !reached[v] {
                reached[v] = true;
                stack.push(v);
            }
        }
    }
    for (node, &p) in injections.p.iter().enumerate() {
        if !reached[node] && p.abs() > ISLAND_INJECTION_TOLERANCE {
            return Err(PowerFlowError::IslandedInjection {
                node,
                injection: p,
            });
        }
    }

    let unknowns: Vec<usize> = (0..n).filter(|&i| reached[i] && i != slack).collect();
    let m = unknowns.len();
    let mut a = vec![0.0; m * m];
    let mut rhs = Vec::with_capacity(m);
    for (r, &i) in unknowns.iter().enumerate() {
        for (c, &j) in unknowns.iter().enumerate() {
            a[r * m + c] = matrix.get(i, j);
        }
        rhs.push(injections.p[i]);
    }
    let x = lu_solve(&mut a, &mut rhs, m).ok_or(PowerFlowError::Singular)?;
    let mut theta = vec![0.0; n];
    for (r, &i) in unknowns.iter().enumerate() {
        theta[i] = x[r];
    }
    Ok(theta)
}

/// Gaussian elimination with partial pivoting. `a` is row-major `m x m`.
fn lu_solve(a: &mut [f64], b: &mut [f64], m: usize) -> Option<Vec<f64>> {
    for k in 0..m {
        let pivot_row = (k..m)
            .max_by(|&i, &j| a[i * m + k].abs().total_cmp(&a[j * m + k].abs()))
            .unwrap();
        if a[pivot_row * m + k].abs() < PIVOT_TOLERANCE {
            return None;
        }
        if pivot_row != k {
            for c in 0..m {
                a.swap(k * m + c, pivot_row * m + c);
            }
            b.swap(k, pivot_row);
        }
        let pivot = a[k * m + k];
        for i in k + 1..m {
            let factor = a[i * m + k] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[i * m + k] = 0.0;
            for c in k + 1..m {
                a[i * m + c] -= factor * a[k * m + c];
            }
            b[i] -= factor * b[k];
        }
    }
    let mut x = vec![0.0; m];
    for k in (0..m).rev() {
        let mut s = b[k];
        for c in k + 1..m {
            s -= a[k * m + c] * x[c];
        }
        x[k] = s / a[k * m + k];
    }
    Some(x)
}

/// Full DC solution: angles, then `p_ij = (theta_i - theta_j) / x_ij` per line.
pub fn solve_dc(
    grid: &GridSpec,
    topo: &Topology,
    matrix: &SusceptanceMatrix,
    injections: &Injections,
    slack: usize,
) -> Result<FlowSolution, PowerFlowError> {
    let theta = solve_angles(matrix, injections, slack)?;
    Ok(line_flows(grid, topo, matrix, theta))
}

pub fn line_flows(
    grid: &GridSpec,
    topo: &Topology,
    matrix: &SusceptanceMatrix,
    theta: Vec<f64>,
) -> FlowSolution {
    let mut flows = vec![0.0; grid.n_lines()];
    let mut loading = vec![0.0; grid.n_lines()];
    for (l, line) in grid.lines.iter().enumerate() {
        if let Some((i, j)) = matrix.nodes.line_nodes(grid, topo, l) {
            flows[l] = (theta[i] - theta[j]) / line.reactance;
            loading[l] = flows[l].abs() / line.thermal_limit;
        }
    }
    FlowSolution {
        theta,
        flows,
        loading,
    }
}

/// Resistive loss estimate `sum r_ij p_ij^2` over in-service lines.
pub fn energy_loss(grid: &GridSpec, sol: &FlowSolution) -> f64 {
    grid.lines
        .iter()
        .zip(&sol.flows)
        .map(|(line, p)| line.resistance * p * p)
        .sum()
}

/// Consecutive overloaded steps per line.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OverflowState {
    pub counters: Vec<u32>,
}

impl OverflowState {
    pub fn new(lines: usize) -> OverflowState {
        OverflowState {
            counters: vec![0; lines],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutcome {
    pub topology: Topology,
    pub overflow: OverflowState,
    pub disconnected: Vec<usize>,
}

/// One pass of thermal protection.
///
/// A line above the hard ratio trips at once. A line above 100% increments
/// its counter and trips once the counter reaches the soft limit. Everything
/// else resets to zero. Tripped lines start their reconnection cooldown.
pub fn cascade_step(
    grid: &GridSpec,
    sol: &FlowSolution,
    overflow: &OverflowState,
    topo: &Topology,
) -> CascadeOutcome {
    let rules = &grid.cascade;
    let mut topology = topo.clone();
    let mut counters = overflow.counters.clone();
    let mut disconnected = Vec::new();
    for l in 0..grid.n_lines() {
        if !topo.line_status[l] {
            counters[l] = 0;
            continue;
        }
        let loading = sol.loading[l];
        let trip = if loading > rules.hard_overflow_ratio {
            true
        } else if loading > 1.0 {
            counters[l] += 1;
            counters[l] >= rules.soft_overflow_steps
        } else {
            counters[l] = 0;
            false
        };
        if trip {
            counters[l] = 0;
            topology.disconnect(l, rules.reconnect_cooldown);
            disconnected.push(l);
        }
    }
    CascadeOutcome {
        topology,
        overflow: OverflowState { counters },
        disconnected,
    }
}
