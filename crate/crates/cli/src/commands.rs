use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gridguard::adversary::{
    append_attack_records, screen_immediate_blackout_lines, train_whitebox_adversary, Adversary, AttackSchedule,
    FlowWeights,
};
use gridguard::advtrain::{adversarial_train, train_agent_selected, AdvTrainConfig, CheckpointSink, TrainOutcome, Validation};
use gridguard::agent::{Agent, OperatorEnv};
use gridguard::checkpoint::{write_training_curve, Checkpoint, ModelKind};
use gridguard::env::{calibrate_normalizer, Env, Normalizer};
use gridguard::eval::{attack_records, evaluate, results_csv, EvalResult, NormalizationBaseline};
use gridguard::grid::GridSpec;
use gridguard::ppo::{derive_seed, init_policy, TrainConfig};
use gridguard::scenario::{load_scenarios, ScenarioProfile};
use gridguard::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{AdversaryKind, Common, Mode, Weights};

// Tags mixed into the base seed so that independent draws never share a stream.
const NORMALIZER_TAG: u64 = 0x6e6f726d;
const SURROGATE_TAG: u64 = 0x73757272;

pub fn set_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

/// Everything a subcommand needs from the common flags.
struct Setup {
    grid: Arc<GridSpec>,
    envs: Vec<Env>,
    cfg: RunConfig,
    schedule: AttackSchedule,
    seed: u64,
}

impl Setup {
    fn new(common: &Common) -> Result<Setup> {
        if common.k == 0 {
            return Err(Error::Config("--k must be at least 1".into()));
        }
        let cfg = RunConfig::load(common.config.as_deref())?.with_seed(common.seed);
        let grid = Arc::new(GridSpec::load(&common.grid)?);
        let envs = load_envs(&grid, &common.scenarios, &cfg)?;
        Ok(Setup {
            grid,
            envs,
            cfg,
            schedule: AttackSchedule { k: common.k },
            seed: common.seed,
        })
    }

    fn normalizer(&self) -> Normalizer {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[NORMALIZER_TAG]));
        calibrate_normalizer(&self.envs, self.cfg.normalizer_samples, &mut rng)
    }

    fn validation(&self, dir: Option<&Path>, adversary: Adversary) -> Result<Option<Validation>> {
        dir.map(|d| {
            Ok(Validation {
                envs: load_envs(&self.grid, d, &self.cfg)?,
                adversary,
                seed: self.seed,
            })
        })
        .transpose()
    }

    fn load_model(&self, path: &Path, kind: ModelKind) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(kind)?;
        ck.check_grid(&self.grid)?;
        Ok(ck)
    }
}

fn load_envs(grid: &Arc<GridSpec>, dir: &Path, cfg: &RunConfig) -> Result<Vec<Env>> {
    let scenarios = load_scenarios(dir, grid)?;
    if scenarios.is_empty() {
        return Err(Error::Config(format!("no scenario CSV files in {}", dir.display())));
    }
    Ok(scenarios
        .into_iter()
        .map(|s| Env::new(grid.clone(), Arc::new(s), &cfg.env))
        .collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn with_epochs(cfg: &TrainConfig, epochs: Option<usize>) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: epochs.unwrap_or(cfg.epochs),
        ..cfg.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains an operator from scratch on `setup.envs`, writing checkpoints under `out`.
fn train_operator(
    setup: &Setup,
    cfg: &TrainConfig,
    validation: Option<&Validation>,
    out: &Path,
    prefix: &str,
) -> Result<TrainOutcome> {
    let gate = setup.cfg.gate;
    let op_env = OperatorEnv::new(setup.envs.clone(), Adversary::None, setup.schedule, gate)?;
    let initial = init_policy(&op_env, setup.normalizer(), cfg)?;
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    let sink = CheckpointSink {
        dir: &ck_dir,
        grid: &setup.grid,
        prefix,
    };
    train_agent_selected(
        setup.envs.clone(),
        initial,
        Adversary::None,
        cfg,
        gate,
        setup.schedule,
        setup.cfg.checkpoint_every,
        validation,
        Some(&sink),
    )
}

fn report_training(what: &str, outcome: &TrainOutcome) {
    let last = outcome.history.last();
    print!(
        "{what}: {} epochs, final mean reward {:.3}, mean steps {:.1}",
        outcome.history.len(),
        last.map_or(f64::NAN, |s| s.mean_reward),
        last.map_or(f64::NAN, |s| s.mean_steps)
    );
    match outcome.best_score {
        Some(score) => println!("; kept epoch {} (validation {score:.3})", outcome.best_epoch),
        None => println!(),
    }
}

pub fn train(common: &Common, epochs: Option<usize>, val: Option<&Path>, out: &Path) -> Result<()> {
    let setup = Setup::new(common)?;
    let cfg = with_epochs(&setup.cfg.agent, epochs)?;
    let validation = setup.validation(val, Adversary::None)?;
    create_dir(out)?;
    let outcome = train_operator(&setup, &cfg, validation.as_ref(), out, "agent")?;
    Checkpoint::agent(&setup.grid, outcome.best.clone(), setup.cfg.gate, cfg, outcome.best_epoch)
        .save(&out.join("agent.json"))?;
    write_training_curve(&out.join("training_curve.csv"), &outcome.history)?;
    report_training("agent", &outcome);
    Ok(())
}

pub fn train_adversary(
    common: &Common,
    mode: Mode,
    agent: Option<&Path>,
    epochs: Option<usize>,
    surrogate_epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let setup = Setup::new(common)?;
    let cfg = with_epochs(&setup.cfg.adversary, epochs)?;
    create_dir(out)?;
    let victim = match (mode, agent) {
        (Mode::Whitebox, Some(path)) => {
            let ck = setup.load_model(path, ModelKind::Agent)?;
            Agent::learned(ck.policy, ck.gate)
        }
        (Mode::Whitebox, None) => return Err(Error::Config("white-box mode needs --agent".into())),
        (Mode::Blackbox, Some(_)) => {
            return Err(Error::Config(
                "black-box mode trains its own surrogate; drop --agent".into(),
            ))
        }
        (Mode::Blackbox, None) => {
            let surrogate_cfg = TrainConfig {
                seed: derive_seed(setup.seed, &[SURROGATE_TAG]),
                ..with_epochs(&setup.cfg.agent, surrogate_epochs)?
            };
            let outcome = train_operator(&setup, &surrogate_cfg, None, out, "surrogate")?;
            Checkpoint::agent(
                &setup.grid,
                outcome.final_policy.clone(),
                setup.cfg.gate,
                surrogate_cfg,
                outcome.best_epoch,
            )
            .save(&out.join("surrogate.json"))?;
            report_training("surrogate", &outcome);
            Agent::learned(outcome.final_policy, setup.cfg.gate)
        }
    };
    let lines = setup.grid.attackable_lines.clone();
    if lines.is_empty() {
        return Err(Error::Config(format!("grid {} has no attackable lines", setup.grid.name)));
    }
    let (policy, history) = train_whitebox_adversary(
        setup.envs.clone(),
        victim,
        lines.clone(),
        setup.schedule,
        setup.normalizer(),
        &cfg,
        |_, _| Ok(()),
    )?;
    let epochs_done = history.len();
    Checkpoint::adversary(&setup.grid, policy, lines, setup.schedule, cfg, epochs_done).save(&out.join("adversary.json"))?;
    write_training_curve(&out.join("adversary_curve.csv"), &history)?;
    let last = history.last();
    println!(
        "adversary: {epochs_done} epochs, final mean reward {:.3}, victim mean steps {:.1}",
        last.map_or(f64::NAN, |s| s.mean_reward),
        last.map_or(f64::NAN, |s| s.mean_steps)
    );
    Ok(())
}

fn learned_adversary(setup: &Setup, path: &Path) -> Result<Adversary> {
    let ck = setup.load_model(path, ModelKind::Adversary)?;
    Ok(Adversary::learned(ck.policy, ck.attackable_lines))
}

pub fn adv_train(
    common: &Common,
    agent: &Path,
    adversary: &Path,
    epochs: Option<usize>,
    val: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let setup = Setup::new(common)?;
    let pretrained = setup.load_model(agent, ModelKind::Agent)?;
    let attacker = learned_adversary(&setup, adversary)?;
    let train_cfg = with_epochs(&setup.cfg.advtrain, epochs)?;
    let cfg = AdvTrainConfig {
        pretrain_epochs: 0,
        advtrain_epochs: train_cfg.epochs,
        train: train_cfg.clone(),
        checkpoint_every: setup.cfg.checkpoint_every,
        gate: pretrained.gate,
        schedule: setup.schedule,
    };
    let validation = setup.validation(val, attacker.clone())?;
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    let sink = CheckpointSink {
        dir: &ck_dir,
        grid: &setup.grid,
        prefix: "advtrain",
    };
    let outcome = adversarial_train(
        setup.envs.clone(),
        pretrained.policy,
        attacker,
        &cfg,
        validation.as_ref(),
        Some(&sink),
    )?;
    Checkpoint::agent(
        &setup.grid,
        outcome.best.clone(),
        cfg.gate,
        train_cfg,
        pretrained.epochs_trained + outcome.best_epoch,
    )
    .save(&out.join("agent.json"))?;
    write_training_curve(&out.join("training_curve.csv"), &outcome.history)?;
    report_training("adversarially trained agent", &outcome);
    Ok(())
}

pub struct EvalArgs {
    pub agent: String,
    pub label: Option<String>,
    pub adversary: AdversaryKind,
    pub adversary_model: Option<PathBuf>,
    pub weights: Weights,
    pub trials: usize,
    pub lowest: bool,
    pub out: PathBuf,
    pub attack_log: Option<PathBuf>,
}

fn baselines(envs: &[Env]) -> Result<Vec<NormalizationBaseline>> {
    envs.par_iter().map(NormalizationBaseline::measure).collect()
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let setup = Setup::new(common)?;
    let (agent, default_label) = match args.agent.as_str() {
        "do-nothing" => (Agent::DoNothing, "do-nothing".to_string()),
        "greedy" => (Agent::Greedy, "greedy".to_string()),
        path => {
            let path = Path::new(path);
            let ck = setup.load_model(path, ModelKind::Agent)?;
            let stem = path.file_stem().map_or("agent".into(), |s| s.to_string_lossy().into_owned());
            (Agent::learned(ck.policy, ck.gate), stem)
        }
    };
    let label = args.label.clone().unwrap_or(default_label);
    if label.contains(',') {
        return Err(Error::Config(format!("label {label:?} contains a comma")));
    }
    let lines = setup.grid.attackable_lines.clone();
    let adversary = match args.adversary {
        AdversaryKind::None => Adversary::None,
        AdversaryKind::Random => Adversary::Random { lines },
        AdversaryKind::Weighted => Adversary::Weighted {
            lines,
            weights: match args.weights {
                Weights::RunningMax => FlowWeights::RunningMax,
                Weights::ThermalLimit => FlowWeights::ThermalLimit,
            },
        },
        AdversaryKind::Learned => match &args.adversary_model {
            Some(path) => learned_adversary(&setup, path)?,
            None => return Err(Error::Config("--adversary learned needs --adversary-model".into())),
        },
    };
    if args.adversary != AdversaryKind::Learned && args.adversary_model.is_some() {
        return Err(Error::Config("--adversary-model only applies to --adversary learned".into()));
    }
    let bases = baselines(&setup.envs)?;
    let rows = evaluate(
        &setup.envs,
        &bases,
        &agent,
        &label,
        &adversary,
        &setup.schedule,
        args.trials,
        setup.seed,
    )?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, &results_csv(&rows))?;
    if let Some(log) = &args.attack_log {
        append_attack_records(log, &attack_records(&rows))?;
    }
    let r = EvalResult::from_rows(&rows, args.lowest);
    println!(
        "{} vs {}: reward {:.2} ± {:.2} (raw {:.3} ± {:.3}), steps {:.1} ± {:.1}, blackout rate {:.2} over {} episodes{}",
        r.agent,
        r.adversary,
        r.mean_reward,
        r.se_reward,
        r.mean_raw,
        r.se_raw,
        r.mean_steps,
        r.se_steps,
        r.blackout_rate,
        r.episodes,
        if r.lowest { " (lowest trial per scenario)" } else { "" }
    );
    Ok(())
}

pub fn screen_lines(common: &Common, out: Option<&Path>) -> Result<()> {
    let setup = Setup::new(common)?;
    let scenarios: Vec<_> = setup.envs.iter().map(|e| (*e.scenario).clone()).collect();
    let lines = screen_immediate_blackout_lines(&setup.grid, &scenarios, &setup.cfg.env)?;
    let mut text = String::from("line,from,to\n");
    for &l in &lines {
        let line = &setup.grid.lines[l];
        writeln!(text, "{l},{},{}", line.from, line.to).unwrap();
    }
    match out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    eprintln!("{} of {} lines black out the grid when cut", lines.len(), setup.grid.n_lines());
    Ok(())
}

pub fn baseline(common: &Common, out: &Path) -> Result<()> {
    let setup = Setup::new(common)?;
    let bases = baselines(&setup.envs)?;
    let mut text = String::from("scenario,r_dn,r_max\n");
    for b in &bases {
        writeln!(text, "{},{:.6},{:.6}", b.scenario, b.r_dn, b.r_max).unwrap();
    }
    write_file(out, &text)
}

pub fn gen_scenarios(grid: &Path, count: usize, seed: u64, prefix: &str, horizon: usize, out: &Path) -> Result<()> {
    if horizon < 2 {
        return Err(Error::Config("--horizon must be at least 2".into()));
    }
    let grid = GridSpec::load(grid)?;
    let profile = ScenarioProfile {
        horizon,
        ..ScenarioProfile::default()
    };
    create_dir(out)?;
    for s in profile.generate_split(&grid, prefix, seed, count) {
        s.validate(&grid)?;
        s.save(&out.join(format!("{}.csv", s.name)))?;
    }
    println!("wrote {count} scenarios to {}", out.display());
    Ok(())
}
