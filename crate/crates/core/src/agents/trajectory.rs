use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub observation: Observation,
    pub action: Action,
    pub reward: Vec<f64>,
    /// Markov key of the state the action was taken in, when the env has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_id: String,
    pub seed: u64,
    pub steps: Vec<TrajectoryStep>,
    pub total_return: Vec<f64>,
}

impl Trajectory {
    pub fn new(env_id: &str, seed: u64) -> Self {
        Self {
            env_id: env_id.into(),
            seed,
            steps: Vec::new(),
            total_return: Vec::new(),
        }
    }

    /// Appends a step and folds its reward into `total_return`.
    pub fn push(&mut self, step: TrajectoryStep) {
        if self.total_return.len() < step.reward.len() {
            self.total_return.resize(step.reward.len(), 0.0);
        }
        for (acc, r) in self.total_return.iter_mut().zip(&step.reward) {
            *acc += r;
        }
        self.steps.push(step);
    }

    pub fn recomputed_return(&self) -> Vec<f64> {
        let dims = self.steps.iter().map(|s| s.reward.len()).max().unwrap_or(0);
        let mut total = vec![0.0; dims];
        for s in &self.steps {
            for (acc, r) in total.iter_mut().zip(&s.reward) {
                *acc += r;
            }
        }
        total
    }

    pub fn is_consistent(&self) -> bool {
        self.recomputed_return() == self.total_return
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}
