//! Dense human-reward shaping and the simulated annotator used to evaluate it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::env::MazeLayout;

pub const DEFAULT_WINDOW_MS: u64 = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// +1 or -1.
    pub value: i8,
    /// Receipt time minus the broadcast time of the credited step.
    pub latency_ms: u64,
}

/// `env_reward + beta * sum(values)` over annotations inside the window.
pub fn shape_reward(env_reward: f64, annotations: &[Annotation], beta: f64, window_ms: u64) -> f64 {
    let sum: i64 = annotations
        .iter()
        .filter(|a| a.latency_ms <= window_ms)
        .map(|a| i64::from(a.value))
        .sum();
    env_reward + beta * sum as f64
}

/// Annotates +1 when a move lies on a shortest path to the goal, else -1.
#[derive(Debug, Clone)]
pub struct MazeOracleAnnotator {
    layout: MazeLayout,
    dist: Vec<u32>,
}

impl MazeOracleAnnotator {
    pub fn new(layout: &MazeLayout) -> Self {
        let (w, h) = (layout.width, layout.height);
        let mut dist = vec![u32::MAX; (w * h) as usize];
        let (gx, gy) = layout.goal();
        dist[(gy * w + gx) as usize] = 0;
        let mut queue = VecDeque::from([(gx, gy)]);
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[(y * w + x) as usize];
            for dir in 0..4 {
                let (nx, ny) = layout.neighbor(x, y, dir);
                let slot = &mut dist[(ny * w + nx) as usize];
                if *slot == u32::MAX {
                    *slot = d + 1;
                    queue.push_back((nx, ny));
                }
            }
        }
        Self {
            layout: layout.clone(),
            dist,
        }
    }

    pub fn distance(&self, x: u32, y: u32) -> u32 {
        self.dist[(y * self.layout.width + x) as usize]
    }

    pub fn annotate_move(&self, x: u32, y: u32, dir: u32) -> i8 {
        let (nx, ny) = self.layout.neighbor(x, y, dir);
        let here = self.distance(x, y);
        if here > 0 && self.distance(nx, ny) + 1 == here {
            1
        } else {
            -1
        }
    }

    /// Same as [`annotate_move`](Self::annotate_move) for a `"x,y"` state key.
    pub fn annotate_key(&self, key: &str, dir: u32) -> Option<i8> {
        let (x, y) = key.split_once(',')?;
        Some(self.annotate_move(x.parse().ok()?, y.parse().ok()?, dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(value: i8, latency_ms: u64) -> Annotation {
        Annotation { value, latency_ms }
    }

    #[test]
    fn identity_without_annotations() {
        assert_eq!(shape_reward(-0.01, &[], 0.5, 1500), -0.01);
    }

    #[test]
    fn adds_weighted_sum() {
        approx::assert_abs_diff_eq!(shape_reward(-0.01, &[ann(1, 10)], 0.5, 1500), 0.49, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(
            shape_reward(0.0, &[ann(1, 0), ann(-1, 0), ann(-1, 0)], 2.0, 1500),
            -2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn late_annotations_are_ignored() {
        assert_eq!(shape_reward(1.0, &[ann(1, 1501)], 0.5, 1500), 1.0);
        assert_eq!(shape_reward(1.0, &[ann(1, 1500)], 0.5, 1500), 1.5);
    }

    proptest::proptest! {
        #[test]
        fn zero_beta_is_identity(r in -10.0..10.0f64, vals in proptest::collection::vec(proptest::bool::ANY, 0..8)) {
            let anns: Vec<_> = vals.iter().map(|&b| ann(if b { 1 } else { -1 }, 0)).collect();
            proptest::prop_assert_eq!(shape_reward(r, &anns, 0.0, 1500), r);
        }
    }

    #[test]
    fn oracle_annotator_follows_shortest_path() {
        for seed in 0..20 {
            let layout = MazeLayout::generate(5, 5, seed);
            let oracle = MazeOracleAnnotator::new(&layout);
            let (mut x, mut y) = layout.start();
            let mut steps = 0;
            while (x, y) != layout.goal() {
                let dir = (0..4).find(|&d| oracle.annotate_move(x, y, d) == 1).expect("some move descends");
                (x, y) = layout.neighbor(x, y, dir);
                steps += 1;
            }
            assert_eq!(steps, oracle.distance(0, 0));
            assert_eq!(oracle.annotate_key("0,0", 9), Some(-1));
        }
    }
}
