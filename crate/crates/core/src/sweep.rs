//! Seed sweeps over the offline training loops, parallel when the
//! `parallel` feature is on. Results are always returned in input order.

use crate::agents::train::{episodes_to_first_success, train_maze, EpisodeStats, QConfig};
use crate::env::EnvError;

#[cfg(feature = "parallel")]
fn map_in_order<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_in_order<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalityRun {
    pub size: u32,
    pub seed: u64,
    pub greedy: EpisodeStats,
}

/// Trains one learner per `(size, seed)` and records its greedy episode.
pub fn optimality_sweep(
    sizes: &[u32],
    seeds: &[u64],
    episodes: u32,
    cfg: QConfig,
) -> Result<Vec<OptimalityRun>, EnvError> {
    let grid: Vec<(u32, u64)> = sizes.iter().flat_map(|&s| seeds.iter().map(move |&x| (s, x))).collect();
    map_in_order(&grid, |&(size, seed)| {
        train_maze(size, seed, episodes, cfg).map(|(_, greedy)| OptimalityRun { size, seed, greedy })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairedRun {
    pub seed: u64,
    pub unshaped: u32,
    pub shaped: u32,
}

/// Episodes-to-first-success with and without oracle shaping; both arms of a
/// pair share the maze and the exploration stream.
pub fn annotation_sweep(
    size: u32,
    seeds: &[u64],
    beta: f64,
    max_episodes: u32,
    cfg: QConfig,
) -> Result<Vec<PairedRun>, EnvError> {
    map_in_order(seeds, |&seed| {
        Ok(PairedRun {
            seed,
            unshaped: episodes_to_first_success(size, seed, None, max_episodes, cfg)?,
            shaped: episodes_to_first_success(size, seed, Some(beta), max_episodes, cfg)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    /// Pairs where the shaped arm needed fewer episodes.
    pub wins: u32,
    pub losses: u32,
    pub ties: u32,
    /// One-sided exact binomial p-value of at least `wins` successes in
    /// `wins + losses` fair trials. Ties are dropped.
    pub p_value: f64,
}

pub fn sign_test(runs: &[PairedRun]) -> SignTest {
    let wins = runs.iter().filter(|r| r.shaped < r.unshaped).count() as u32;
    let losses = runs.iter().filter(|r| r.shaped > r.unshaped).count() as u32;
    let ties = runs.len() as u32 - wins - losses;
    SignTest {
        wins,
        losses,
        ties,
        p_value: binomial_upper_tail(wins + losses, wins),
    }
}

/// P(X >= k) for X ~ Binomial(n, 1/2), summed in log space.
pub fn binomial_upper_tail(n: u32, k: u32) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_fact = |m: u32| (1..=m).map(|i| f64::from(i).ln()).sum::<f64>();
    let ln_half_n = f64::from(n) * 0.5f64.ln();
    (k..=n)
        .map(|i| (ln_fact(n) - ln_fact(i) - ln_fact(n - i) + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Lower median of a non-empty slice.
pub fn median(values: &[u32]) -> u32 {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_results_keep_input_order() {
        let runs = optimality_sweep(&[3, 4], &[5, 1], 20, QConfig::default()).unwrap();
        let order: Vec<(u32, u64)> = runs.iter().map(|r| (r.size, r.seed)).collect();
        assert_eq!(order, [(3, 5), (3, 1), (4, 5), (4, 1)]);
    }

    #[test]
    fn upper_tail_matches_pascal_counts() {
        // Independent route: integer binomial coefficients from Pascal's rule.
        let n = 20usize;
        let mut row = vec![1u64];
        for _ in 0..n {
            let mut next = vec![1u64; row.len() + 1];
            for i in 1..row.len() {
                next[i] = row[i - 1] + row[i];
            }
            row = next;
        }
        for k in 0..=n {
            let count: u64 = row[k..].iter().sum();
            let expected = count as f64 / (1u64 << n) as f64;
            let got = binomial_upper_tail(n as u32, k as u32);
            assert!((got - expected).abs() < 1e-12, "k={k}: {got} vs {expected}");
        }
        assert_eq!(binomial_upper_tail(5, 6), 0.0);
    }

    #[test]
    fn sign_test_drops_ties() {
        let runs = [
            PairedRun { seed: 0, unshaped: 9, shaped: 1 },
            PairedRun { seed: 1, unshaped: 4, shaped: 4 },
            PairedRun { seed: 2, unshaped: 2, shaped: 3 },
        ];
        let t = sign_test(&runs);
        assert_eq!((t.wins, t.losses, t.ties), (1, 1, 1));
        assert!((t.p_value - 0.75).abs() < 1e-12);
        assert_eq!(median(&[5, 1, 3, 2]), 2);
    }
}
