//! Offline training loops used by evaluation sweeps and benches.

use super::{shape_reward, Annotation, MazeOracleAnnotator, QTable, StateEncoder};
use crate::env::{Action, EnvError, Environment, GridMaze};
use crate::rng::{split_seed, CounterRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub steps: u32,
    pub total_return: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// How an episode selects actions and whether it learns.
pub enum Mode<'a> {
    /// Epsilon-greedy with TD updates; the optional annotator shapes rewards.
    Learn {
        rng: &'a mut CounterRng,
        annotator: Option<(&'a MazeOracleAnnotator, f64)>,
    },
    /// Pure greedy, no updates.
    Greedy,
}

/// Runs one episode from `reset(seed)`; controller 0 acts, reward dim 0 is
/// the learning signal.
pub fn run_q_episode(
    env: &mut dyn Environment,
    q: &mut QTable,
    encoder: &StateEncoder,
    seed: u64,
    mut mode: Mode<'_>,
) -> Result<EpisodeStats, EnvError> {
    let obs = env.reset(seed)?;
    let mut key = encoder.encode(env, &obs[0]);
    let mut stats = EpisodeStats {
        steps: 0,
        total_return: 0.0,
        terminated: false,
        truncated: false,
    };
    loop {
        let a = match &mut mode {
            Mode::Learn { rng, .. } => q.sample(&key, rng),
            Mode::Greedy => q.greedy(&key),
        };
        let out = env.step(&[Action::discrete(a)])?;
        let next = encoder.encode(env, &out.observations[0]);
        let r = out.rewards[0][0];
        stats.steps += 1;
        stats.total_return += r;
        if let Mode::Learn { annotator, .. } = &mode {
            let shaped = match annotator {
                Some((oracle, beta)) => {
                    let anns: Vec<Annotation> = oracle
                        .annotate_key(&key, a)
                        .map(|value| Annotation { value, latency_ms: 0 })
                        .into_iter()
                        .collect();
                    shape_reward(r, &anns, *beta, u64::MAX)
                }
                None => r,
            };
            q.q_update(&key, a, shaped, &next, out.terminated);
        }
        key = next;
        if out.done() {
            stats.terminated = out.terminated;
            stats.truncated = out.truncated;
            return Ok(stats);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.99,
            epsilon: 0.1,
        }
    }
}

/// Trains on a `size x size` maze (layout seed = `seed`) and returns the
/// greedy evaluation episode.
pub fn train_maze(size: u32, seed: u64, episodes: u32, cfg: QConfig) -> Result<(QTable, EpisodeStats), EnvError> {
    let mut env = GridMaze::new(size, size, seed)?;
    let mut q = QTable::new(4, cfg.alpha, cfg.gamma, cfg.epsilon).map_err(|e| EnvError::Config(e.to_string()))?;
    let mut rng = CounterRng::new(split_seed(seed, "agent:learner"));
    for ep in 0..episodes {
        run_q_episode(
            &mut env,
            &mut q,
            &StateEncoder::EnvKey,
            u64::from(ep),
            Mode::Learn {
                rng: &mut rng,
                annotator: None,
            },
        )?;
    }
    let eval = run_q_episode(&mut env, &mut q, &StateEncoder::EnvKey, 0, Mode::Greedy)?;
    Ok((q, eval))
}

/// Episodes until the first one that reaches the goal (1-based), capped at
/// `max_episodes + 1` when it never does. Paired arms share `seed`, so the
/// maze and the exploration stream are identical.
pub fn episodes_to_first_success(
    size: u32,
    seed: u64,
    shaped: Option<f64>,
    max_episodes: u32,
    cfg: QConfig,
) -> Result<u32, EnvError> {
    let mut env = GridMaze::new(size, size, seed)?;
    let oracle = MazeOracleAnnotator::new(env.layout());
    let mut q = QTable::new(4, cfg.alpha, cfg.gamma, cfg.epsilon).map_err(|e| EnvError::Config(e.to_string()))?;
    let mut rng = CounterRng::new(split_seed(seed, "agent:learner"));
    for ep in 0..max_episodes {
        let stats = run_q_episode(
            &mut env,
            &mut q,
            &StateEncoder::EnvKey,
            u64::from(ep),
            Mode::Learn {
                rng: &mut rng,
                annotator: shaped.map(|beta| (&oracle, beta)),
            },
        )?;
        if stats.terminated {
            return Ok(ep + 1);
        }
    }
    Ok(max_episodes + 1)
}
