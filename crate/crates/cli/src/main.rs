//! `gridguard`: train operators and attackers, run adversarial training and
//! evaluate on bundled or user-supplied grids.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridguard::Error;

#[derive(Parser, Debug)]
#[command(name = "gridguard", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Grid JSON file.
    #[arg(long)]
    pub grid: PathBuf,
    /// Directory of scenario CSV files.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Base seed. `GRIDGUARD_SEED` takes precedence when set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attack period in steps.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for rollouts and evaluation.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an operator without attacks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Held-out scenarios used to keep the best checkpoint.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a line-cutting adversary against a frozen operator.
    TrainAdversary {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::Whitebox)]
        mode: Mode,
        /// Victim checkpoint (white-box mode).
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Surrogate training epochs (black-box mode).
        #[arg(long)]
        surrogate_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained operator against a fixed adversary.
    AdvTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        adversary: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Play episodes and write one CSV row per episode.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path, or `do-nothing` / `greedy`.
        #[arg(long)]
        agent: String,
        /// Name written to the `agent` column (defaults to the file stem).
        #[arg(long)]
        label: Option<String>,
        #[arg(long, value_enum, default_value_t = AdversaryKind::None)]
        adversary: AdversaryKind,
        /// Adversary checkpoint, required for `--adversary learned`.
        #[arg(long)]
        adversary_model: Option<PathBuf>,
        /// Weighting for `--adversary weighted`.
        #[arg(long, value_enum, default_value_t = Weights::RunningMax)]
        weights: Weights,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Summarize each scenario by its lowest-scoring trial.
        #[arg(long)]
        lowest: bool,
        /// Results CSV.
        #[arg(long)]
        out: PathBuf,
        /// Append attack records (JSON lines) here.
        #[arg(long)]
        attack_log: Option<PathBuf>,
    },
    /// List lines whose loss blacks out the grid within one step.
    ScreenLines {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the do-nothing and lookahead anchors of every scenario.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic scenario CSVs for a grid.
    GenScenarios {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "scenario")]
        prefix: String,
        #[arg(long, default_value_t = 288)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Whitebox,
    Blackbox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdversaryKind {
    None,
    Random,
    Weighted,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    RunningMax,
    ThermalLimit,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::CheckpointMismatch(_) => 2,
        Error::Divergence { .. } => 4,
        Error::InvalidGrid(_)
        | Error::InvalidScenario { .. }
        | Error::InfeasibleStart { .. }
        | Error::ShapeMismatch { .. }
        | Error::AllMasked
        | Error::DegenerateBaseline { .. } => 3,
    }
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var("GRIDGUARD_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("GRIDGUARD_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = seed_override()?;
    let fix = |mut c: Common| -> Result<Common, Error> {
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(jobs) = c.jobs {
            commands::set_jobs(jobs)?;
        }
        Ok(c)
    };
    match cli.command {
        Command::Train { common, epochs, val, out } => commands::train(&fix(common)?, epochs, val.as_deref(), &out),
        Command::TrainAdversary {
            common,
            mode,
            agent,
            epochs,
            surrogate_epochs,
            out,
        } => commands::train_adversary(&fix(common)?, mode, agent.as_deref(), epochs, surrogate_epochs, &out),
        Command::AdvTrain {
            common,
            agent,
            adversary,
            epochs,
            val,
            out,
        } => commands::adv_train(&fix(common)?, &agent, &adversary, epochs, val.as_deref(), &out),
        Command::Eval {
            common,
            agent,
            label,
            adversary,
            adversary_model,
            weights,
            trials,
            lowest,
            out,
            attack_log,
        } => commands::eval(
            &fix(common)?,
            &commands::EvalArgs {
                agent,
                label,
                adversary,
                adversary_model,
                weights,
                trials,
                lowest,
                out,
                attack_log,
            },
        ),
        Command::ScreenLines { common, out } => commands::screen_lines(&fix(common)?, out.as_deref()),
        Command::Baseline { common, out } => commands::baseline(&fix(common)?, &out),
        Command::GenScenarios {
            grid,
            count,
            seed: flag_seed,
            prefix,
            horizon,
            out,
        } => commands::gen_scenarios(&grid, count, seed.unwrap_or(flag_seed), &prefix, horizon, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
