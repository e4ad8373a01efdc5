//! Maps environment state to the string keys used by tabular learners.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateEncoder {
    /// The env's Markov key, falling back to the raw observation.
    EnvKey,
    /// Uniform bins per observation component; values outside clamp to the
    /// edge bins.
    Bins { low: Vec<f64>, high: Vec<f64>, bins: Vec<u32> },
}

impl StateEncoder {
    pub fn mountain_car(bins: u32) -> Self {
        use crate::env::mountain_car::{MAX_POSITION, MAX_SPEED, MIN_POSITION};
        StateEncoder::Bins {
            low: vec![MIN_POSITION, -MAX_SPEED],
            high: vec![MAX_POSITION, MAX_SPEED],
            bins: vec![bins, bins],
        }
    }

    pub fn encode(&self, env: &dyn Environment, obs: &Observation) -> String {
        match self {
            StateEncoder::EnvKey => match env.markov_key() {
                Some(key) => join(key.iter()),
                None => join(obs.values().iter()),
            },
            StateEncoder::Bins { low, high, bins } => {
                let idx = obs.values().iter().enumerate().map(|(i, &v)| {
                    let n = bins[i].max(1);
                    let frac = (v - low[i]) / (high[i] - low[i]);
                    ((frac * f64::from(n)).floor().max(0.0) as u32).min(n - 1)
                });
                join(idx)
            }
        }
    }
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GridMaze, MountainCar};

    #[test]
    fn maze_uses_position() {
        let mut env = GridMaze::new(3, 3, 0).unwrap();
        let obs = env.reset(0).unwrap();
        assert_eq!(StateEncoder::EnvKey.encode(&env, &obs[0]), "0,0");
    }

    #[test]
    fn bins_clamp_to_edges() {
        let enc = StateEncoder::mountain_car(10);
        let env = MountainCar::new();
        assert_eq!(enc.encode(&env, &Observation::new(vec![-1.2, -0.07])), "0,0");
        assert_eq!(enc.encode(&env, &Observation::new(vec![0.6, 0.07])), "9,9");
        assert_eq!(enc.encode(&env, &Observation::new(vec![-0.3, 0.0])), "5,5");
    }
}
