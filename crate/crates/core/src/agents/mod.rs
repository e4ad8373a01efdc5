//! Built-in learners and evaluators: tabular Q-learning with optional human
//! reward shaping, a Bradley-Terry preference model, and exhaustive Pareto
//! enumeration.

pub mod builtin;
mod encode;
pub mod pareto;
pub mod preference;
mod qlearning;
pub mod shaping;
pub mod train;
mod trajectory;

use thiserror::Error;

use crate::env::EnvError;

pub use encode::StateEncoder;
pub use pareto::{
    dominates, enumerate_pareto_front, replay_witness, scalarize, select_by_utility, ParetoEntry, ParetoFront,
};
pub use preference::{
    bt_gradient, bt_negative_log_likelihood, fit_reward_model, pairs_from_ranking, FitOutcome, LinearRewardModel,
    OneHotFeatures, PreferencePair, Preferred,
};
pub use qlearning::QTable;
pub use shaping::{shape_reward, Annotation, MazeOracleAnnotator, DEFAULT_WINDOW_MS};
pub use trajectory::{Trajectory, TrajectoryStep};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("search exceeded its budget of {budget} expanded nodes")]
    SearchBudgetExceeded { budget: u64 },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
}
