//! Tabular Q-learning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::rng::CounterRng;

/// Action values keyed by state key; each row has one entry per action.
/// Rows that were never written read as all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: BTreeMap<String, Vec<f64>>,
    pub arity: u32,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl QTable {
    pub fn new(arity: u32, alpha: f64, gamma: f64, epsilon: f64) -> Result<Self, AgentError> {
        if arity == 0 {
            return Err(AgentError::InvalidParameter("action arity must be positive".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AgentError::InvalidParameter(format!("alpha {alpha} not in (0, 1]")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(AgentError::InvalidParameter(format!("gamma {gamma} not in [0, 1]")));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(AgentError::InvalidParameter(format!("epsilon {epsilon} not in [0, 1]")));
        }
        Ok(Self {
            values: BTreeMap::new(),
            arity,
            alpha,
            gamma,
            epsilon,
        })
    }

    pub fn get(&self, s: &str, a: u32) -> f64 {
        self.values.get(s).map_or(0.0, |row| row[a as usize])
    }

    pub fn row(&self, s: &str) -> Vec<f64> {
        self.values
            .get(s)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.arity as usize])
    }

    pub fn max_value(&self, s: &str) -> f64 {
        self.values
            .get(s)
            .map_or(0.0, |row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Argmax with lowest-index tie-breaking.
    pub fn greedy(&self, s: &str) -> u32 {
        match self.values.get(s) {
            None => 0,
            Some(row) => argmax(row),
        }
    }

    /// Gap between the best and second-best action value in `s`.
    pub fn margin(&self, s: &str) -> f64 {
        let mut row = self.row(s);
        if row.len() < 2 {
            return f64::INFINITY;
        }
        row.sort_by(|a, b| b.total_cmp(a));
        row[0] - row[1]
    }

    /// One temporal-difference update of `q[s, a]`; no other entry changes.
    pub fn q_update(&mut self, s: &str, a: u32, reward: f64, s_next: &str, terminal: bool) {
        let bootstrap = if terminal { 0.0 } else { self.max_value(s_next) };
        let target = reward + self.gamma * bootstrap;
        let arity = self.arity as usize;
        let alpha = self.alpha;
        let row = self.values.entry(s.to_string()).or_insert_with(|| vec![0.0; arity]);
        let q = &mut row[a as usize];
        *q += alpha * (target - *q);
    }

    /// Explores when `rng_draw < epsilon`, picking `floor(tiebreak_draw * arity)`.
    pub fn epsilon_greedy(&self, s: &str, rng_draw: f64, tiebreak_draw: f64) -> u32 {
        if rng_draw < self.epsilon {
            ((tiebreak_draw * f64::from(self.arity)) as u32).min(self.arity - 1)
        } else {
            self.greedy(s)
        }
    }

    /// Draws exactly two values from `rng` regardless of the branch taken.
    pub fn sample(&self, s: &str, rng: &mut CounterRng) -> u32 {
        let explore = rng.next_f64();
        let pick = rng.next_f64();
        self.epsilon_greedy(s, explore, pick)
    }
}

pub(crate) fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}
