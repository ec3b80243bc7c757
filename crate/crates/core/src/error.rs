use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid grid:\n  - {}", .0.join("\n  - "))]
    InvalidGrid(Vec<String>),

    #[error("invalid scenario {name}: {}", .problems.join("; "))]
    InvalidScenario { name: String, problems: Vec<String> },

    #[error("infeasible start for scenario {scenario}: {reason}")]
    InfeasibleStart { scenario: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual} ({what})")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("no legal action available")]
    AllMasked,

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("degenerate normalization baseline for {scenario}: R_max={r_max} <= R_dn={r_dn}")]
    DegenerateBaseline {
        scenario: String,
        r_dn: f64,
        r_max: f64,
    },

    #[error("checkpoint does not match grid: {0}")]
    CheckpointMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
