//! Episode evaluation, score normalization and result tables.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{run_episode, Adversary, AttackRecord, AttackSchedule, EpisodeResult};
use crate::agent::Agent;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::ppo::derive_seed;

/// Per-scenario anchors: the do-nothing operator scores 0, the lookahead
/// oracle scores 100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBaseline {
    pub scenario: String,
    pub r_dn: f64,
    pub r_max: f64,
}

impl NormalizationBaseline {
    pub fn new(scenario: &str, r_dn: f64, r_max: f64) -> Result<NormalizationBaseline> {
        if !(r_max > r_dn) {
            return Err(Error::DegenerateBaseline {
                scenario: scenario.to_string(),
                r_dn,
                r_max,
            });
        }
        Ok(NormalizationBaseline {
            scenario: scenario.to_string(),
            r_dn,
            r_max,
        })
    }

    /// Runs both anchor operators on the clean scenario.
    pub fn measure(env: &Env) -> Result<NormalizationBaseline> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let schedule = AttackSchedule::default();
        let dn = run_episode(env, &Agent::DoNothing, &Adversary::None, &schedule, &mut rng)?;
        let max = run_episode(env, &Agent::Greedy, &Adversary::None, &schedule, &mut rng)?;
        NormalizationBaseline::new(&env.scenario.name, dn.reward, max.reward)
    }
}

/// `100 (raw - R_dn) / (R_max - R_dn)`, clamped to `[-100, 100]`.
pub fn normalize_score(raw: f64, base: &NormalizationBaseline) -> f64 {
    (100.0 * (raw - base.r_dn) / (base.r_max - base.r_dn)).clamp(-100.0, 100.0)
}

/// One episode of one (agent, adversary) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub agent: String,
    pub adversary: String,
    pub scenario: String,
    pub trial: usize,
    pub seed: u64,
    pub raw_reward: f64,
    pub norm_reward: f64,
    pub steps: usize,
    pub blackout: bool,
    #[serde(skip)]
    pub attacks: Vec<(usize, usize)>,
}

/// Plays `trials` episodes on every scenario. Episode `(i, j)` draws its
/// randomness from `derive_seed(seed, [i, j])`; rows come back ordered by
/// scenario then trial whatever the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    envs: &[Env],
    baselines: &[NormalizationBaseline],
    agent: &Agent,
    agent_label: &str,
    adversary: &Adversary,
    schedule: &AttackSchedule,
    trials: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if envs.len() != baselines.len() {
        return Err(Error::ShapeMismatch {
            what: "baselines per scenario",
            expected: envs.len(),
            actual: baselines.len(),
        });
    }
    let cells: Vec<(usize, usize)> = (0..envs.len())
        .flat_map(|i| (0..trials).map(move |j| (i, j)))
        .collect();
    cells
        .into_par_iter()
        .map(|(i, j)| {
            let episode_seed = derive_seed(seed, &[i as u64, j as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let EpisodeResult {
                reward,
                steps,
                blackout,
                attacks,
            } = run_episode(&envs[i], agent, adversary, schedule, &mut rng)?;
            Ok(EvalRow {
                agent: agent_label.to_string(),
                adversary: adversary.label().to_string(),
                scenario: envs[i].scenario.name.clone(),
                trial: j,
                seed: episode_seed,
                raw_reward: reward,
                norm_reward: normalize_score(reward, &baselines[i]),
                steps,
                blackout,
                attacks,
            })
        })
        .collect()
}

pub const RESULTS_HEADER: &str = "agent,adversary,scenario,trial,seed,raw_reward,norm_reward,steps,blackout";

pub fn results_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            r.agent, r.adversary, r.scenario, r.trial, r.seed, r.raw_reward, r.norm_reward, r.steps, r.blackout
        )
        .unwrap();
    }
    out
}

pub fn attack_records(rows: &[EvalRow]) -> Vec<AttackRecord> {
    rows.iter()
        .enumerate()
        .map(|(episode, r)| AttackRecord {
            episode,
            scenario: r.scenario.clone(),
            seed: r.seed,
            attacks: r.attacks.clone(),
            reward: r.raw_reward,
            steps: r.steps,
        })
        .collect()
}

/// Mean and standard error of the mean (sample standard deviation / sqrt n).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregate of one (agent, adversary) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub agent: String,
    pub adversary: String,
    pub episodes: usize,
    pub mean_reward: f64,
    pub se_reward: f64,
    pub mean_raw: f64,
    pub se_raw: f64,
    pub mean_steps: f64,
    pub se_steps: f64,
    pub blackout_rate: f64,
    /// Whether each scenario contributed only its worst trial.
    pub lowest: bool,
}

impl EvalResult {
    /// With `lowest`, each scenario is represented by its lowest-scoring
    /// trial and errors are taken across scenarios.
    pub fn from_rows(rows: &[EvalRow], lowest: bool) -> EvalResult {
        let picked: Vec<&EvalRow> = if lowest {
            let mut names: Vec<&str> = rows.iter().map(|r| r.scenario.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            names
                .iter()
                .filter_map(|name| {
                    rows.iter()
                        .filter(|r| r.scenario == *name)
                        .min_by(|a, b| a.norm_reward.total_cmp(&b.norm_reward).then(a.trial.cmp(&b.trial)))
                })
                .collect()
        } else {
            rows.iter().collect()
        };
        let norm: Vec<f64> = picked.iter().map(|r| r.norm_reward).collect();
        let raw: Vec<f64> = picked.iter().map(|r| r.raw_reward).collect();
        let steps: Vec<f64> = picked.iter().map(|r| r.steps as f64).collect();
        let (mean_reward, se_reward) = mean_se(&norm);
        let (mean_raw, se_raw) = mean_se(&raw);
        let (mean_steps, se_steps) = mean_se(&steps);
        EvalResult {
            agent: rows.first().map(|r| r.agent.clone()).unwrap_or_default(),
            adversary: rows.first().map(|r| r.adversary.clone()).unwrap_or_default(),
            episodes: picked.len(),
            mean_reward,
            se_reward,
            mean_raw,
            se_raw,
            mean_steps,
            se_steps,
            blackout_rate: picked.iter().filter(|r| r.blackout).count() as f64 / picked.len().max(1) as f64,
            lowest,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> NormalizationBaseline {
        NormalizationBaseline::new("s", 10.0, 30.0).unwrap()
    }

    #[test]
    fn anchors_map_to_zero_and_hundred() {
        assert_eq!(normalize_score(10.0, &base()), 0.0);
        assert_eq!(normalize_score(30.0, &base()), 100.0);
        assert_eq!(normalize_score(20.0, &base()), 50.0);
    }

    #[test]
    fn scores_are_clamped() {
        assert_eq!(normalize_score(10.0 - 2.0 * 20.0, &base()), -100.0);
        assert_eq!(normalize_score(1e9, &base()), 100.0);
    }

    #[test]
    fn degenerate_baseline_is_rejected() {
        assert!(matches!(
            NormalizationBaseline::new("s", 5.0, 5.0),
            Err(Error::DegenerateBaseline { .. })
        ));
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
