//! Power-network operation under line-disconnection attacks.
//!
//! The crate bundles a DC power-flow grid simulator with thermal cascades, a
//! PPO learner for both the grid operator and the attacker, baseline
//! attackers, adversarial fine-tuning of a pretrained operator, and the
//! evaluation harness used by the `gridguard` CLI.

pub mod adversary;
pub mod advtrain;
pub mod agent;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod policy;
pub mod powerflow;
pub mod ppo;
pub mod scenario;

pub use error::{Error, Result};
