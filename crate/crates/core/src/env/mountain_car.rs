//! Underpowered car in a valley; the classic constants.

use serde_json::{json, Value};

use super::{
    Action, ActionSpace, EnvCapabilities, EnvError, Environment, Gauge, Lifecycle, Observation, ObservationSpace,
    RenderFrame, RenderMode, StepOutcome,
};
use crate::rng::CounterRng;

pub const FORCE: f64 = 0.001;
pub const GRAVITY: f64 = 0.0025;
pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.5;
pub const MAX_STEPS: u32 = 200;

#[derive(Debug, Clone)]
pub struct MountainCar {
    caps: EnvCapabilities,
    position: f64,
    velocity: f64,
    steps: u32,
    lifecycle: Lifecycle,
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl MountainCar {
    pub fn new() -> Self {
        Self {
            caps: EnvCapabilities {
                num_controllers: 1,
                reward_dims: 1,
                action_spaces: vec![ActionSpace::Discrete { n: 3 }],
                observation_spaces: vec![ObservationSpace::flat(2)],
                render_modes: vec![RenderMode::ScalarGauge],
                intentions: false,
            },
            position: -0.5,
            velocity: 0.0,
            steps: 0,
            lifecycle: Lifecycle::Fresh,
        }
    }

    /// Starts a live episode from an explicit state.
    pub fn with_state(position: f64, velocity: f64) -> Self {
        let mut car = Self::new();
        car.position = position.clamp(MIN_POSITION, MAX_POSITION);
        car.velocity = velocity.clamp(-MAX_SPEED, MAX_SPEED);
        car.lifecycle = Lifecycle::Live;
        car
    }

    pub fn state(&self) -> (f64, f64) {
        (self.position, self.velocity)
    }

    fn observation(&self) -> Observation {
        Observation::new(vec![self.position, self.velocity])
    }
}

impl Environment for MountainCar {
    fn env_id(&self) -> &str {
        "mountain_car"
    }

    fn capabilities(&self) -> &EnvCapabilities {
        &self.caps
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        let mut rng = CounterRng::new(seed);
        self.position = -0.6 + 0.2 * rng.next_f64();
        self.velocity = 0.0;
        self.steps = 0;
        self.lifecycle = Lifecycle::Live;
        Ok(vec![self.observation()])
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        self.lifecycle.ensure_steppable()?;
        self.caps.check_joint_action(joint_action)?;
        let push = f64::from(joint_action[0].as_discrete().expect("checked discrete")) - 1.0;
        self.velocity += push * FORCE + (3.0 * self.position).cos() * (-GRAVITY);
        self.velocity = self.velocity.clamp(-MAX_SPEED, MAX_SPEED);
        self.position += self.velocity;
        self.position = self.position.clamp(MIN_POSITION, MAX_POSITION);
        if self.position == MIN_POSITION && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        self.steps += 1;
        let terminated = self.position >= GOAL_POSITION;
        let truncated = !terminated && self.steps >= MAX_STEPS;
        if terminated || truncated {
            self.lifecycle = Lifecycle::Ended;
        }
        Ok(StepOutcome {
            observations: vec![self.observation()],
            rewards: vec![vec![-1.0]],
            terminated,
            truncated,
            info: [("steps".to_string(), json!(self.steps))].into_iter().collect(),
        })
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        self.lifecycle.ensure_reset()?;
        Ok(RenderFrame {
            mode: RenderMode::ScalarGauge,
            width: 0,
            height: 0,
            cells: vec![],
            sprites: vec![],
            gauges: vec![
                Gauge {
                    name: "position".into(),
                    value: self.position,
                    min: MIN_POSITION,
                    max: MAX_POSITION,
                },
                Gauge {
                    name: "velocity".into(),
                    value: self.velocity,
                    min: -MAX_SPEED,
                    max: MAX_SPEED,
                },
            ],
            overlay_text: vec![format!("step {}", self.steps)],
        })
    }

    fn snapshot(&self) -> Value {
        json!({
            "env": "mountain_car",
            "position": self.position,
            "velocity": self.velocity,
            "steps": self.steps,
            "lifecycle": self.lifecycle,
        })
    }

    fn try_clone(&self) -> Option<Box<dyn Environment>> {
        Some(Box::new(self.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent transcription of the dynamics, used as the oracle.
    fn oracle_step(p: f64, v: f64, a: u32) -> (f64, f64) {
        let mut v = v + (a as f64 - 1.0) * 0.001 - 0.0025 * (3.0 * p).cos();
        v = v.max(-0.07).min(0.07);
        let mut p = (p + v).max(-1.2).min(0.6);
        if p <= -1.2 && v < 0.0 {
            v = 0.0;
            p = -1.2;
        }
        (p, v)
    }

    fn run(policy: impl Fn(f64, f64) -> u32) -> (bool, u32) {
        let mut car = MountainCar::with_state(-0.5, 0.0);
        for _ in 0..MAX_STEPS {
            let (p, v) = car.state();
            let out = car.step(&[Action::discrete(policy(p, v))]).unwrap();
            if out.terminated {
                return (true, car.steps);
            }
            if out.truncated {
                return (false, car.steps);
            }
        }
        unreachable!("truncation at 200 steps")
    }

    #[test]
    fn coasting_from_rest() {
        let mut car = MountainCar::with_state(-0.5, 0.0);
        car.step(&[Action::discrete(1)]).unwrap();
        assert_eq!(car.state().1, -0.0025 * (-1.5f64).cos());
    }

    #[test]
    fn matches_oracle_dynamics() {
        let mut car = MountainCar::with_state(-0.5, 0.0);
        let (mut p, mut v) = (-0.5, 0.0);
        for i in 0..150u32 {
            let a = (i / 17) % 3;
            let out = car.step(&[Action::discrete(a)]).unwrap();
            (p, v) = oracle_step(p, v, a);
            let got = out.observations[0].values();
            approx::assert_abs_diff_eq!(got[0], p, epsilon = 1e-12);
            approx::assert_abs_diff_eq!(got[1], v, epsilon = 1e-12);
            if out.done() {
                break;
            }
        }
    }

    #[test]
    fn full_throttle_is_not_enough() {
        let (reached, steps) = run(|_, _| 2);
        assert!(!reached);
        assert_eq!(steps, MAX_STEPS);
    }

    #[test]
    fn pumping_with_velocity_reaches_goal() {
        let (reached, steps) = run(|_, v| if v < 0.0 { 0 } else { 2 });
        assert!(reached, "oscillation policy should reach the goal, took {steps}");
    }

    #[test]
    fn reset_range_over_seeds() {
        let mut car = MountainCar::new();
        for seed in 0..1000 {
            let obs = car.reset(seed).unwrap();
            let (p, v) = (obs[0].values()[0], obs[0].values()[1]);
            assert!((-0.6..=-0.4).contains(&p), "seed {seed}: {p}");
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn clamps_hold() {
        let mut car = MountainCar::new();
        for seed in 0..20 {
            car.reset(seed).unwrap();
            for i in 0..MAX_STEPS {
                let a = ((seed as u32).wrapping_mul(7) + i / 5) % 3;
                let out = car.step(&[Action::discrete(a)]).unwrap();
                let (p, v) = car.state();
                assert!((MIN_POSITION..=MAX_POSITION).contains(&p));
                assert!((-MAX_SPEED..=MAX_SPEED).contains(&v));
                if out.done() {
                    break;
                }
            }
        }
    }

    #[test]
    fn renders_gauges() {
        let mut car = MountainCar::new();
        car.reset(3).unwrap();
        let f = car.render().unwrap();
        assert_eq!(f.mode, RenderMode::ScalarGauge);
        let names: Vec<_> = f.gauges.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["position", "velocity"]);
        assert_eq!(f.gauges[0].value, car.state().0);
    }
}
