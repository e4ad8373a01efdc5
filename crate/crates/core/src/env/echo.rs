//! Trivial environment that echoes the last action as its observation.
//! Used as a bridge handshake fixture.

use serde_json::{json, Value};

use super::{
    Action, ActionSpace, EnvCapabilities, EnvError, Environment, Lifecycle, Observation, ObservationSpace,
    RenderFrame, RenderMode, StepOutcome,
};

pub const ECHO_STEPS: u32 = 10;

#[derive(Debug, Clone)]
pub struct EchoEnv {
    caps: EnvCapabilities,
    last: f64,
    steps: u32,
    lifecycle: Lifecycle,
}

impl Default for EchoEnv {
    fn default() -> Self {
        Self {
            caps: EnvCapabilities {
                num_controllers: 1,
                reward_dims: 1,
                action_spaces: vec![ActionSpace::Discrete { n: 4 }],
                observation_spaces: vec![ObservationSpace::flat(1)],
                render_modes: vec![RenderMode::SpriteList],
                intentions: false,
            },
            last: 0.0,
            steps: 0,
            lifecycle: Lifecycle::Fresh,
        }
    }
}

impl Environment for EchoEnv {
    fn env_id(&self) -> &str {
        "echo"
    }

    fn capabilities(&self) -> &EnvCapabilities {
        &self.caps
    }

    fn reset(&mut self, _seed: u64) -> Result<Vec<Observation>, EnvError> {
        self.last = 0.0;
        self.steps = 0;
        self.lifecycle = Lifecycle::Live;
        Ok(vec![Observation::new(vec![0.0])])
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        self.lifecycle.ensure_steppable()?;
        self.caps.check_joint_action(joint_action)?;
        self.last = joint_action[0].values()[0];
        self.steps += 1;
        let truncated = self.steps >= ECHO_STEPS;
        if truncated {
            self.lifecycle = Lifecycle::Ended;
        }
        Ok(StepOutcome {
            observations: vec![Observation::new(vec![self.last])],
            rewards: vec![vec![0.0]],
            terminated: false,
            truncated,
            info: Default::default(),
        })
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        self.lifecycle.ensure_reset()?;
        Ok(RenderFrame {
            mode: RenderMode::SpriteList,
            width: 1,
            height: 1,
            cells: vec![],
            sprites: vec![],
            gauges: vec![],
            overlay_text: vec![format!("echo {}", self.last)],
        })
    }

    fn snapshot(&self) -> Value {
        json!({"env": "echo", "last": self.last, "steps": self.steps, "lifecycle": self.lifecycle})
    }

    fn try_clone(&self) -> Option<Box<dyn Environment>> {
        Some(Box::new(self.clone()))
    }
}
