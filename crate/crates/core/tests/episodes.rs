mod common;

use std::sync::Arc;

use gridguard::env::{AdversaryAction, AgentAction, Env, EnvConfig, Normalizer};
use gridguard::grid::{CascadeConfig, GeneratorSpec, GridSpec, LineSpec, LoadSpec};
use gridguard::scenario::Scenario;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn blackout_pays_exactly_zero_and_normal_operation_pays() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = common::reward_fuzz(&mut rng, 300, usize::MAX);
    assert!(s.blackout_steps > 50, "fuzz never reached a blackout: {s:?}");
    assert_eq!(s.nonzero_blackout_rewards, 0, "{s:?}");
    assert_eq!(s.nonpositive_normal_rewards, 0, "{s:?}");
}

/// Slack at 0 feeding a unit load at 2 over a direct line and a two-hop path.
fn three_node() -> Env {
    let line = |from, to, thermal_limit| LineSpec {
        from,
        to,
        reactance: 0.1,
        resistance: 0.01,
        thermal_limit,
    };
    let grid = GridSpec {
        name: "three".into(),
        base_mva: 100.0,
        substations: vec![0, 1, 2],
        lines: vec![line(0, 1, 0.9), line(1, 2, 0.9), line(0, 2, 2.0)],
        generators: vec![GeneratorSpec {
            substation: 0,
            p_min: 0.0,
            p_max: 5.0,
            ramp_limit: 0.2,
        }],
        loads: vec![LoadSpec {
            substation: 2,
            nominal_p: 1.0,
        }],
        slack: 0,
        attackable_lines: vec![2],
        cascade: CascadeConfig::default(),
    };
    grid.validate().unwrap();
    let scenario = Scenario {
        name: "flat".into(),
        loads: vec![vec![1.0]; 11],
        gen_max: vec![vec![5.0]; 11],
    };
    Env::new(Arc::new(grid), Arc::new(scenario), &EnvConfig::default())
}

#[test]
fn scripted_three_node_episode() {
    let env = three_node();
    // offset: 0.01 * (0.81 + 0.81 + 4) + 0.2
    let c = 0.01 * (0.81 + 0.81 + 4.0) + 0.2;
    assert!((env.reward_offset - c).abs() < 1e-12);

    let s0 = env.reset().unwrap();
    // intact: 2/3 direct, 1/3 around
    assert!((s0.sol.flows[2] - 2.0 / 3.0).abs() < 1e-12);
    let s1 = env.step(&s0, AgentAction::DoNothing, AdversaryAction::NONE);
    let intact_loss = 0.01 * (1.0 / 9.0 + 1.0 / 9.0 + 4.0 / 9.0);
    assert!((s1.reward - (c - intact_loss)).abs() < 1e-12);

    // losing the direct line pushes 1.0 through two 0.9-rated lines
    let s2 = env.step(&s1.state, AgentAction::DoNothing, AdversaryAction::line(2));
    assert!(!s2.done);
    assert!((s2.state.sol.flows[0] - 1.0).abs() < 1e-12);
    assert!((s2.reward - (c - 0.02)).abs() < 1e-12);
    assert_eq!(s2.state.overflow.counters, vec![1, 1, 0]);

    let s3 = env.step(&s2.state, AgentAction::DoNothing, AdversaryAction::NONE);
    assert!((s3.reward - (c - 0.02)).abs() < 1e-12);
    assert_eq!(s3.state.overflow.counters, vec![2, 2, 0]);

    // third overloaded step: both lines trip and the load is cut off
    let s4 = env.step(&s3.state, AgentAction::DoNothing, AdversaryAction::NONE);
    assert!(s4.done && s4.state.blackout);
    assert_eq!(s4.tripped, vec![0, 1]);
    assert_eq!(s4.reward, 0.0);
}

#[test]
fn cooldown_outlasts_the_soft_overload_window() {
    let env = three_node();
    let s0 = env.reset().unwrap();
    let s1 = env.step(&s0, AgentAction::DoNothing, AdversaryAction::line(2));
    let s2 = env.step(&s1.state, AgentAction::DoNothing, AdversaryAction::NONE);
    // cooldown 3 was started on the cut; one tick per step
    assert_eq!(s2.state.topo.cooldowns[2], 2);
    let reconnect = env.actions.actions.iter().position(|a| *a == AgentAction::Reconnect(2)).unwrap();
    assert!(!env.legal_mask(&s2.state)[reconnect]);
    let s3 = env.step(&s2.state, AgentAction::DoNothing, AdversaryAction::NONE);
    assert!(s3.state.blackout, "three overloaded steps before the cooldown ends");
}

#[test]
fn normalizer_centres_and_scales() {
    let samples = vec![vec![1.0, 10.0, -2.0], vec![3.0, 10.0, 2.0], vec![2.0, 10.0, 0.0]];
    let n = Normalizer::fit(&samples);
    let out = n.apply(&[2.0, 10.0, 0.0]);
    assert_eq!(out, vec![0.0, 0.0, 0.0]);
    // population std of {1, 2, 3} is sqrt(2/3); the constant column keeps unit scale
    let z = n.apply(&[3.0, 11.0, 2.0]);
    assert!((z[0] - 1.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(z[1], 1.0);
}
