mod common;

use gridguard::adversary::AttackSchedule;
use gridguard::checkpoint::{Checkpoint, ModelKind};
use gridguard::env::{ActionGate, Normalizer};
use gridguard::grid::GridSpec;
use gridguard::nn::PolicyParams;
use gridguard::policy::Policy;
use gridguard::ppo::TrainConfig;
use gridguard::scenario::ScenarioProfile;
use gridguard::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPLITS: [(&str, u64, usize); 3] = [("train", 1000, 10), ("val", 1500, 5), ("test", 2000, 10)];

#[test]
fn bundled_scenarios_regenerate_exactly() {
    for name in GridSpec::bundled_names() {
        let grid = GridSpec::bundled(name).unwrap();
        for (split, seed, count) in SPLITS {
            let dir = common::data_dir().join("scenarios").join(name).join(split);
            let fresh = ScenarioProfile::default().generate_split(&grid, split, seed, count);
            assert_eq!(fresh.len(), count);
            for s in fresh {
                let on_disk = std::fs::read_to_string(dir.join(format!("{}.csv", s.name))).unwrap();
                assert_eq!(s.to_csv(), on_disk, "{name}/{split}/{}", s.name);
            }
        }
    }
}

fn random_policy(grid: &GridSpec, actions: usize) -> Policy {
    let obs = gridguard::env::observation_len(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    Policy::new(PolicyParams::new(obs, &[16, 8], actions, &mut rng), Normalizer::identity(obs)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let grid = GridSpec::bundled("toy5").unwrap();
    let n = gridguard::env::ActionSpace::new(&grid).len();
    let policy = random_policy(&grid, n);
    let gate = ActionGate {
        danger_threshold: Some(0.95),
    };
    let ck = Checkpoint::agent(&grid, policy.clone(), gate, TrainConfig::default(), 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.policy.params.checksum(), policy.params.checksum());
    back.check_grid(&grid).unwrap();
    back.expect_kind(ModelKind::Agent).unwrap();
}

#[test]
fn checkpoint_for_another_grid_is_rejected() {
    let toy = GridSpec::bundled("toy5").unwrap();
    let desk = GridSpec::bundled("desk14").unwrap();
    let ck = Checkpoint::adversary(
        &toy,
        random_policy(&toy, 1 + toy.attackable_lines.len()),
        toy.attackable_lines.clone(),
        AttackSchedule::default(),
        TrainConfig::default(),
        1,
    );
    assert!(matches!(ck.check_grid(&desk), Err(Error::CheckpointMismatch(_))));
    assert!(matches!(ck.expect_kind(ModelKind::Agent), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn truncated_checkpoint_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format_version\": 1, \"kind\": \"agent\"").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { .. })));
}
