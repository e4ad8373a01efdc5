//! Exhaustive Pareto-front enumeration for deterministic multi-objective
//! environments.
//!
//! Depth-first search over action sequences. When the environment exposes a
//! Markov key, a node is pruned if the same state was already reached at a
//! depth no greater than its own with a partial return at least as good in
//! every objective: any completion of the pruned node is also available to
//! the earlier one with an equal or better result.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::env::{Action, ActionSpace, Environment};

pub const NODE_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub returns: Vec<f64>,
    /// Discrete action indices that reproduce `returns` from the start state.
    pub witness: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub entries: Vec<ParetoEntry>,
    pub objective_dims: usize,
}

/// `a` dominates `b`: at least as good everywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

fn weakly_dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

impl ParetoFront {
    /// Keeps non-dominated candidates, one per distinct return vector (the
    /// first seen), sorted lexicographically by return.
    pub fn from_candidates(objective_dims: usize, candidates: Vec<ParetoEntry>) -> Self {
        let mut entries: Vec<ParetoEntry> = Vec::new();
        for c in candidates {
            if entries.iter().any(|e| dominates(&e.returns, &c.returns) || e.returns == c.returns) {
                continue;
            }
            entries.retain(|e| !dominates(&c.returns, &e.returns));
            entries.push(c);
        }
        entries.sort_by(|a, b| lex_cmp(&a.returns, &b.returns));
        Self {
            entries,
            objective_dims,
        }
    }

    pub fn is_dominance_free(&self) -> bool {
        self.entries.iter().enumerate().all(|(i, a)| {
            self.entries
                .iter()
                .enumerate()
                .all(|(j, b)| i == j || !dominates(&a.returns, &b.returns))
        })
    }

    /// One `returns<TAB>actions` row per entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let r: Vec<String> = e.returns.iter().map(|x| x.to_string()).collect();
            let a: Vec<String> = e.witness.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!("{}\t{}\n", r.join(","), a.join(",")));
        }
        out
    }
}

pub fn scalarize(weights: &[f64], return_vec: &[f64]) -> Result<f64, AgentError> {
    if weights.len() != return_vec.len() {
        return Err(AgentError::InvalidParameter(format!(
            "{} weights for a {}-objective return",
            weights.len(),
            return_vec.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(AgentError::InvalidParameter("weights must be non-negative".into()));
    }
    Ok(weights.iter().zip(return_vec).map(|(w, r)| w * r).sum())
}

/// Argmax of the scalarized return; ties go to the lexicographically first entry.
pub fn select_by_utility<'a>(front: &'a ParetoFront, weights: &[f64]) -> Result<&'a ParetoEntry, AgentError> {
    let mut best: Option<(&ParetoEntry, f64)> = None;
    for e in &front.entries {
        let u = scalarize(weights, &e.returns)?;
        if best.is_none_or(|(_, b)| u > b) {
            best = Some((e, u));
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| AgentError::InvalidParameter("empty front".into()))
}

struct Search {
    arity: u32,
    horizon: u32,
    expanded: u64,
    budget: u64,
    prune: bool,
    seen: HashMap<Vec<i64>, Vec<(u32, Vec<f64>)>>,
    leaves: Vec<ParetoEntry>,
}

impl Search {
    fn visit(&mut self, env: &dyn Environment, depth: u32, partial: &[f64], path: &mut Vec<u32>) -> Result<(), AgentError> {
        if depth == self.horizon {
            self.leaves.push(ParetoEntry {
                returns: partial.to_vec(),
                witness: path.clone(),
            });
            return Ok(());
        }
        for a in 0..self.arity {
            self.expanded += 1;
            if self.expanded > self.budget {
                return Err(AgentError::SearchBudgetExceeded { budget: self.budget });
            }
            let mut child = env
                .try_clone()
                .ok_or(AgentError::Unsupported("environment cannot be cloned"))?;
            let out = child.step(&[Action::discrete(a)])?;
            let ret: Vec<f64> = partial.iter().zip(&out.rewards[0]).map(|(p, r)| p + r).collect();
            path.push(a);
            if out.done() {
                self.leaves.push(ParetoEntry {
                    returns: ret,
                    witness: path.clone(),
                });
            } else if !self.pruned(child.as_ref(), depth + 1, &ret) {
                self.visit(child.as_ref(), depth + 1, &ret, path)?;
            }
            path.pop();
        }
        Ok(())
    }

    fn pruned(&mut self, env: &dyn Environment, depth: u32, ret: &[f64]) -> bool {
        if !self.prune {
            return false;
        }
        let Some(key) = env.markov_key() else {
            return false;
        };
        let seen = self.seen.entry(key).or_default();
        if seen.iter().any(|(d, r)| *d <= depth && weakly_dominates(r, ret)) {
            return true;
        }
        seen.retain(|(d, r)| !(depth <= *d && weakly_dominates(ret, r)));
        seen.push((depth, ret.to_vec()));
        false
    }
}

/// Enumerates the front from the environment's current state, which must be
/// live and reset. Rewards of controller 0 are the objective vector.
pub fn enumerate_pareto_front(env: &dyn Environment, horizon: u32) -> Result<ParetoFront, AgentError> {
    enumerate_with(env, horizon, NODE_BUDGET, true)
}

/// Variant with an explicit node budget and optional pruning.
pub fn enumerate_with(env: &dyn Environment, horizon: u32, budget: u64, prune: bool) -> Result<ParetoFront, AgentError> {
    let caps = env.capabilities();
    let arity = match caps.action_spaces.first() {
        Some(ActionSpace::Discrete { n }) if caps.num_controllers == 1 => *n,
        _ => {
            return Err(AgentError::Unsupported(
                "Pareto enumeration needs one controller with a discrete action space",
            ))
        }
    };
    let dims = caps.reward_dims as usize;
    let mut search = Search {
        arity,
        horizon,
        expanded: 0,
        budget,
        prune,
        seen: HashMap::new(),
        leaves: Vec::new(),
    };
    let start = vec![0.0; dims];
    if prune {
        search.pruned(env, 0, &start);
    }
    search.visit(env, 0, &start, &mut Vec::new())?;
    Ok(ParetoFront::from_candidates(dims, search.leaves))
}

/// Replays a witness on a clone of `start`, returning the summed reward vector.
pub fn replay_witness(start: &dyn Environment, witness: &[u32]) -> Result<Vec<f64>, AgentError> {
    let mut env = start
        .try_clone()
        .ok_or(AgentError::Unsupported("environment cannot be cloned"))?;
    let mut total = vec![0.0; start.capabilities().reward_dims as usize];
    for &a in witness {
        let out = env.step(&[Action::discrete(a)])?;
        for (t, r) in total.iter_mut().zip(&out.rewards[0]) {
            *t += r;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::env::{DeepSeaTreasure, DstFixture};

    fn dst(fixture: &str) -> DeepSeaTreasure {
        let mut env = DeepSeaTreasure::new(DstFixture::parse(fixture).unwrap(), 100).unwrap();
        env.reset(0).unwrap();
        env
    }

    /// Shortest time to each treasure by BFS over the raw grid rules, then a
    /// pairwise dominance filter over (value, -time).
    fn bfs_oracle_front(fixture: &DstFixture) -> Vec<Vec<f64>> {
        let (w, h) = (fixture.width() as i64, fixture.height() as i64);
        let mut dist = HashMap::new();
        dist.insert((0i64, 0i64), 0u32);
        let mut queue = VecDeque::from([(0i64, 0i64)]);
        let mut found = Vec::new();
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[&(x, y)];
            if let Some(v) = fixture.treasure_at(x as u32, y as u32) {
                found.push(vec![v, -f64::from(d)]);
                continue;
            }
            for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h || fixture.is_rock(nx as u32, ny as u32) {
                    continue;
                }
                dist.entry((nx, ny)).or_insert_with(|| {
                    queue.push_back((nx, ny));
                    d + 1
                });
            }
        }
        let mut front: Vec<Vec<f64>> = found
            .iter()
            .filter(|a| !found.iter().any(|b| dominates(b, a)))
            .cloned()
            .collect();
        front.sort_by(|a, b| lex_cmp(a, b));
        front
    }

    #[test]
    fn default_fixture_matches_bfs_oracle() {
        let env = dst(crate::env::DEFAULT_DST_FIXTURE);
        let front = enumerate_pareto_front(&env, 25).unwrap();
        let got: Vec<Vec<f64>> = front.entries.iter().map(|e| e.returns.clone()).collect();
        assert_eq!(got, bfs_oracle_front(env.fixture()));
        assert_eq!(front.entries.len(), 10);
        assert!(front.is_dominance_free());
        for e in &front.entries {
            assert_eq!(replay_witness(&env, &e.witness).unwrap(), e.returns);
        }
    }

    #[test]
    fn pruned_search_equals_plain_dfs_on_short_horizons() {
        let env = dst(crate::env::DEFAULT_DST_FIXTURE);
        for horizon in 1..=7 {
            let fast = enumerate_with(&env, horizon, NODE_BUDGET, true).unwrap();
            let slow = enumerate_with(&env, horizon, NODE_BUDGET, false).unwrap();
            let r = |f: &ParetoFront| f.entries.iter().map(|e| e.returns.clone()).collect::<Vec<_>>();
            assert_eq!(r(&fast), r(&slow), "horizon {horizon}");
        }
    }

    #[test]
    fn single_treasure_front() {
        let env = dst("dst v1\n0 1 7\n");
        let front = enumerate_pareto_front(&env, 10).unwrap();
        assert_eq!(front.entries.len(), 1);
        assert_eq!(front.entries[0].returns, vec![7.0, -1.0]);
    }

    #[test]
    fn budget_guard() {
        let env = dst(crate::env::DEFAULT_DST_FIXTURE);
        assert!(matches!(
            enumerate_with(&env, 30, 1_000, false),
            Err(AgentError::SearchBudgetExceeded { .. })
        ));
    }

    #[test]
    fn scalarize_examples() {
        assert_eq!(scalarize(&[1.0, 0.0], &[3.0, -9.0]).unwrap(), 3.0);
        assert_eq!(scalarize(&[0.5, 0.5], &[4.0, -2.0]).unwrap(), 1.0);
        assert!(scalarize(&[1.0], &[1.0, 2.0]).is_err());
        assert!(scalarize(&[-1.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn utility_selects_extremes_and_breaks_ties_lexicographically() {
        let env = dst(crate::env::DEFAULT_DST_FIXTURE);
        let front = enumerate_pareto_front(&env, 25).unwrap();
        assert_eq!(select_by_utility(&front, &[1.0, 0.0]).unwrap().returns, vec![124.0, -19.0]);
        assert_eq!(select_by_utility(&front, &[0.0, 1.0]).unwrap().returns, vec![1.0, -1.0]);
        let flat = ParetoFront {
            entries: vec![
                ParetoEntry { returns: vec![1.0, 2.0], witness: vec![0] },
                ParetoEntry { returns: vec![2.0, 1.0], witness: vec![1] },
            ],
            objective_dims: 2,
        };
        assert_eq!(select_by_utility(&flat, &[1.0, 1.0]).unwrap().witness, vec![0]);
    }

    #[test]
    fn tsv_rows() {
        let env = dst("dst v1\n0 1 7\n");
        let tsv = enumerate_pareto_front(&env, 3).unwrap().to_tsv();
        assert_eq!(tsv, "7,-1\t2\n");
    }
}
