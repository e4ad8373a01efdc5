//! Bradley-Terry preference model over linear rewards.
//!
//! For a pair with feature sums `phi_pref` and `phi_other`, the margin is
//! `d = w . (phi_pref - phi_other)`, the loss is `softplus(-d)` and its
//! gradient is `-sigmoid(-d) * (phi_pref - phi_other)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentError, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRewardModel {
    pub weights: Vec<f64>,
    pub feature_dim: usize,
}

impl LinearRewardModel {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            weights: vec![0.0; feature_dim],
            feature_dim,
        }
    }

    pub fn reward(&self, phi: &[f64]) -> f64 {
        dot(&self.weights, phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preferred {
    A,
    B,
}

/// A labelled comparison between two trajectories, reduced to feature sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub label: Preferred,
}

impl PreferencePair {
    fn diff(&self) -> Vec<f64> {
        let (p, o) = match self.label {
            Preferred::A => (&self.a, &self.b),
            Preferred::B => (&self.b, &self.a),
        };
        p.iter().zip(o).map(|(x, y)| x - y).collect()
    }
}

/// One-hot features over (state key, action) pairs, indexed in first-seen
/// order of a fixed vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OneHotFeatures {
    index: BTreeMap<(String, String), usize>,
}

impl OneHotFeatures {
    pub fn fit<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut index = BTreeMap::new();
        for t in trajectories {
            for step in &t.steps {
                let next = index.len();
                index.entry(Self::key(step)).or_insert(next);
            }
        }
        Self { index }
    }

    fn key(step: &super::TrajectoryStep) -> (String, String) {
        let state = step.state_key.clone().unwrap_or_else(|| format!("{:?}", step.observation.values()));
        (state, format!("{:?}", step.action.values()))
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }

    /// Sum of step features; steps outside the vocabulary contribute nothing.
    pub fn feature_sum(&self, t: &Trajectory) -> Vec<f64> {
        let mut phi = vec![0.0; self.dim()];
        for step in &t.steps {
            if let Some(&i) = self.index.get(&Self::key(step)) {
                phi[i] += 1.0;
            }
        }
        phi
    }

    pub fn pair(&self, a: &Trajectory, b: &Trajectory, label: Preferred) -> PreferencePair {
        PreferencePair {
            a: self.feature_sum(a),
            b: self.feature_sum(b),
            label,
        }
    }
}

/// Adjacent-rank pairs from a best-first ranking: (r0 > r1), (r1 > r2), ...
pub fn pairs_from_ranking(ranking: &[String]) -> Vec<(String, String)> {
    ranking.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn bt_negative_log_likelihood(model: &LinearRewardModel, pair: &PreferencePair) -> f64 {
    softplus(-dot(&model.weights, &pair.diff()))
}

pub fn bt_gradient(model: &LinearRewardModel, pair: &PreferencePair) -> Vec<f64> {
    let diff = pair.diff();
    let s = sigmoid(-dot(&model.weights, &diff));
    diff.into_iter().map(|d| -s * d).collect()
}

pub fn mean_loss(model: &LinearRewardModel, pairs: &[PreferencePair]) -> f64 {
    pairs.iter().map(|p| bt_negative_log_likelihood(model, p)).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: LinearRewardModel,
    /// Set when every pair has identical feature sums, so nothing was learned.
    pub degenerate: bool,
}

/// Full-batch gradient descent on the mean loss from zero weights.
pub fn fit_reward_model(
    pairs: &[PreferencePair],
    feature_dim: usize,
    steps: usize,
    learning_rate: f64,
) -> Result<FitOutcome, AgentError> {
    if pairs.is_empty() {
        return Err(AgentError::InvalidParameter("fit_reward_model needs at least one pair".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.a.len() != feature_dim || p.b.len() != feature_dim) {
        return Err(AgentError::InvalidParameter(format!(
            "pair features have lengths {}/{}, expected {feature_dim}",
            p.a.len(),
            p.b.len()
        )));
    }
    let degenerate = pairs.iter().all(|p| p.a == p.b);
    let mut model = LinearRewardModel::zeros(feature_dim);
    if degenerate {
        tracing::warn!("DegenerateFeatures: all preference pairs have identical feature sums");
        return Ok(FitOutcome { model, degenerate });
    }
    let n = pairs.len() as f64;
    for _ in 0..steps {
        let mut grad = vec![0.0; feature_dim];
        for p in pairs {
            for (g, x) in grad.iter_mut().zip(bt_gradient(&model, p)) {
                *g += x / n;
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= learning_rate * g;
        }
    }
    Ok(FitOutcome { model, degenerate })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::env::{Action, Observation};
    use crate::agents::TrajectoryStep;

    fn pair(a: Vec<f64>, b: Vec<f64>, label: Preferred) -> PreferencePair {
        PreferencePair { a, b, label }
    }

    #[test]
    fn equal_rewards_give_ln2() {
        let m = LinearRewardModel {
            weights: vec![0.3, -1.0],
            feature_dim: 2,
        };
        let p = pair(vec![1.0, 2.0], vec![1.0, 2.0], Preferred::A);
        approx::assert_abs_diff_eq!(bt_negative_log_likelihood(&m, &p), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn saturates_for_large_margins() {
        let m = LinearRewardModel {
            weights: vec![1.0],
            feature_dim: 1,
        };
        assert!(bt_negative_log_likelihood(&m, &pair(vec![10.0], vec![0.0], Preferred::A)) < 1e-4);
        // Stable at extreme margins in both directions.
        let big = bt_negative_log_likelihood(&m, &pair(vec![0.0], vec![1000.0], Preferred::A));
        approx::assert_relative_eq!(big, 1000.0, max_relative = 1e-12);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let m = LinearRewardModel {
            weights: vec![0.5, -0.25],
            feature_dim: 2,
        };
        let (a, b) = (vec![1.0, 3.0], vec![2.0, 0.0]);
        let (ra, rb) = (m.reward(&a), m.reward(&b));
        let direct = -(rb.exp() / (ra.exp() + rb.exp())).ln();
        approx::assert_abs_diff_eq!(
            bt_negative_log_likelihood(&m, &pair(a, b, Preferred::B)),
            direct,
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_pair_sign_follows_preference() {
        let out = fit_reward_model(&[pair(vec![3.0], vec![1.0], Preferred::B)], 1, 50, 0.1).unwrap();
        assert!(out.model.weights[0] < 0.0);
        assert!(!out.degenerate);
    }

    #[test]
    fn empty_and_degenerate_inputs() {
        assert!(fit_reward_model(&[], 2, 10, 0.1).is_err());
        let out = fit_reward_model(&[pair(vec![1.0, 1.0], vec![1.0, 1.0], Preferred::A)], 2, 10, 0.1).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.model.weights, vec![0.0, 0.0]);
    }

    #[test]
    fn ranking_yields_adjacent_pairs() {
        let r: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            pairs_from_ranking(&r),
            vec![("x".to_string(), "y".to_string()), ("y".to_string(), "z".to_string())]
        );
    }

    #[test]
    fn one_hot_counts_visits() {
        let mut t = Trajectory::new("grid_maze", 0);
        for (k, a) in [("0,0", 1), ("1,0", 2), ("0,0", 1)] {
            t.push(TrajectoryStep {
                observation: Observation::new(vec![]),
                action: Action::discrete(a),
                reward: vec![0.0],
                state_key: Some(k.into()),
            });
        }
        let f = OneHotFeatures::fit([&t]);
        assert_eq!(f.dim(), 2);
        let mut phi = f.feature_sum(&t);
        phi.sort_by(f64::total_cmp);
        assert_eq!(phi, vec![1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            w in proptest::collection::vec(-2.0..2.0f64, 5),
            a in proptest::collection::vec(-3.0..3.0f64, 5),
            b in proptest::collection::vec(-3.0..3.0f64, 5),
            pref_a in any::<bool>(),
        ) {
            let p = pair(a, b, if pref_a { Preferred::A } else { Preferred::B });
            let m = LinearRewardModel { weights: w.clone(), feature_dim: 5 };
            let g = bt_gradient(&m, &p);
            let h = 1e-5;
            for i in 0..5 {
                let mut up = m.clone();
                up.weights[i] += h;
                let mut down = m.clone();
                down.weights[i] -= h;
                let fd = (bt_negative_log_likelihood(&up, &p) - bt_negative_log_likelihood(&down, &p)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-6, "component {i}: fd {fd} vs {}", g[i]);
            }
        }
    }
}
