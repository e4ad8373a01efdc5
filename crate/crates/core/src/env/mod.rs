//! Environment abstraction with the reset/step/render contract, extended with
//! vector rewards and per-controller (joint) actions.
//!
//! Every environment is deterministic given its reset seed and the sequence
//! of joint actions; internal randomness comes from a [`CounterRng`] seeded
//! at reset.
//!
//! [`CounterRng`]: crate::rng::CounterRng

pub mod coverage;
pub mod dst;
mod echo;
pub mod maze;
pub mod mountain_car;
mod registry;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use coverage::CoverageTeam;
pub use dst::{DeepSeaTreasure, DstFixture, DEFAULT_DST_FIXTURE};
pub use echo::EchoEnv;
pub use maze::{GridMaze, MazeLayout, Move};
pub use mountain_car::MountainCar;
pub use registry::{make_env, EnvSpec, EXTERNAL_ENV, KNOWN_ENVS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action for controller {controller} violates its space: {reason}")]
    SpaceViolation { controller: usize, reason: String },
    #[error("step called after the episode ended; reset first")]
    SteppedAfterEnd,
    #[error("environment has not been reset")]
    NotReset,
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("bridge failure: {0}")]
    Bridge(String),
}

/// Vector of numbers that serializes integral values as JSON integers, so a
/// discrete action reads `[1]` on the wire rather than `[1.0]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Numbers(pub Vec<f64>);

impl Serialize for Numbers {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &x in &self.0 {
            if x.is_finite() && x.fract() == 0.0 && x.abs() < 9.0e15 && !(x == 0.0 && x.is_sign_negative()) {
                seq.serialize_element(&(x as i64))?;
            } else {
                seq.serialize_element(&x)?;
            }
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Numbers {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vec::<f64>::deserialize(d).map(Numbers)
    }
}

/// One controller's action. Discrete actions are `[index]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Numbers);

impl Action {
    pub fn discrete(index: u32) -> Self {
        Action(Numbers(vec![f64::from(index)]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0 .0
    }

    /// The discrete index, if this action is a single non-negative integer.
    pub fn as_discrete(&self) -> Option<u32> {
        match self.values() {
            [x] if x.fract() == 0.0 && *x >= 0.0 && *x <= f64::from(u32::MAX) => Some(*x as u32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Numbers);

impl Observation {
    pub fn new(values: Vec<f64>) -> Self {
        Observation(Numbers(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0 .0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { n: u32 },
    Interval { low: f64, high: f64 },
}

impl ActionSpace {
    pub fn check(&self, action: &Action) -> Result<(), String> {
        match self {
            ActionSpace::Discrete { n } => match action.as_discrete() {
                Some(i) if i < *n => Ok(()),
                Some(i) => Err(format!("index {i} out of range 0..{n}")),
                None => Err(format!("expected a single integer in 0..{n}, got {:?}", action.values())),
            },
            ActionSpace::Interval { low, high } => match action.values() {
                [x] if x.is_finite() && low <= x && x <= high => Ok(()),
                v => Err(format!("expected a single value in [{low}, {high}], got {v:?}")),
            },
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match self {
            ActionSpace::Discrete { n } => *n > 0,
            ActionSpace::Interval { low, high } => low.is_finite() && high.is_finite() && low <= high,
        }
    }

    pub fn discrete_arity(&self) -> Option<u32> {
        match self {
            ActionSpace::Discrete { n } => Some(*n),
            ActionSpace::Interval { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSpace {
    pub shape: Vec<u32>,
}

impl ObservationSpace {
    pub fn flat(len: u32) -> Self {
        Self { shape: vec![len] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Grid,
    SpriteList,
    ScalarGauge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvCapabilities {
    pub num_controllers: u32,
    pub reward_dims: u32,
    pub action_spaces: Vec<ActionSpace>,
    pub observation_spaces: Vec<ObservationSpace>,
    pub render_modes: Vec<RenderMode>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub intentions: bool,
}

impl EnvCapabilities {
    pub fn is_multi_objective(&self) -> bool {
        self.reward_dims > 1
    }

    pub fn is_multi_agent(&self) -> bool {
        self.num_controllers > 1
    }

    /// Structural validity: at least one controller and reward dimension, one
    /// well-formed space per controller, at least one render mode.
    pub fn validate(&self) -> Result<(), String> {
        if self.num_controllers == 0 {
            return Err("num_controllers must be >= 1".into());
        }
        if self.reward_dims == 0 {
            return Err("reward_dims must be >= 1".into());
        }
        let n = self.num_controllers as usize;
        if self.action_spaces.len() != n {
            return Err(format!("expected {n} action spaces, got {}", self.action_spaces.len()));
        }
        if self.observation_spaces.len() != n {
            return Err(format!(
                "expected {n} observation spaces, got {}",
                self.observation_spaces.len()
            ));
        }
        if let Some(i) = self.action_spaces.iter().position(|s| !s.is_well_formed()) {
            return Err(format!("action space {i} is malformed"));
        }
        if self.observation_spaces.iter().any(|s| s.shape.is_empty() || s.shape.contains(&0)) {
            return Err("observation shapes must be non-empty with positive extents".into());
        }
        if self.render_modes.is_empty() {
            return Err("at least one render mode is required".into());
        }
        Ok(())
    }

    /// Checks a joint action against the per-controller spaces.
    pub fn check_joint_action(&self, joint: &[Action]) -> Result<(), EnvError> {
        if joint.len() != self.num_controllers as usize {
            return Err(EnvError::SpaceViolation {
                controller: joint.len().min(self.num_controllers as usize),
                reason: format!("joint action has {} entries, expected {}", joint.len(), self.num_controllers),
            });
        }
        for (controller, (space, action)) in self.action_spaces.iter().zip(joint).enumerate() {
            space
                .check(action)
                .map_err(|reason| EnvError::SpaceViolation { controller, reason })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub rewards: Vec<Vec<f64>>,
    pub terminated: bool,
    pub truncated: bool,
    #[serde(default)]
    pub info: BTreeMap<String, Value>,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x: u32,
    pub y: u32,
    pub tag: String,
    /// Wall bitmask: 1 north, 2 east, 4 south, 8 west.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walls: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub x: u32,
    pub y: u32,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    pub name: String,
    pub value: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderFrame {
    pub mode: RenderMode,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sprites: Vec<Sprite>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gauges: Vec<Gauge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlay_text: Vec<String>,
}

impl RenderFrame {
    pub fn coordinates_in_bounds(&self) -> bool {
        let cells = self.cells.iter().map(|c| (c.x, c.y));
        let sprites = self.sprites.iter().map(|s| (s.x, s.y));
        cells.chain(sprites).all(|(x, y)| x < self.width && y < self.height)
    }

    pub fn sprites_tagged<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a Sprite> + 'a {
        self.sprites.iter().filter(move |s| s.tag == tag)
    }
}

/// The environment contract. One caller steps an instance at a time.
pub trait Environment: Send {
    fn env_id(&self) -> &str;

    fn capabilities(&self) -> &EnvCapabilities;

    /// Puts the environment in the initial state determined by `seed`.
    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError>;

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError>;

    /// Pure read of the current state.
    fn render(&self) -> Result<RenderFrame, EnvError>;

    /// Canonical description of the full internal state, used for hashing.
    fn snapshot(&self) -> Value;

    /// Records a controller's declared target. Only environments whose
    /// capabilities advertise `intentions` accept this.
    fn declare_intention(&mut self, _controller: usize, _target: Option<u32>) -> Result<(), EnvError> {
        Err(EnvError::Unsupported("intentions"))
    }

    /// Time-independent Markov state, when the environment can provide one.
    /// Used to prune exhaustive searches.
    fn markov_key(&self) -> Option<Vec<i64>> {
        None
    }

    fn try_clone(&self) -> Option<Box<dyn Environment>> {
        None
    }
}

/// Tracks the live/ended lifecycle shared by the native environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Lifecycle {
    #[default]
    Fresh,
    Live,
    Ended,
}

impl Lifecycle {
    pub(crate) fn ensure_steppable(self) -> Result<(), EnvError> {
        match self {
            Lifecycle::Fresh => Err(EnvError::NotReset),
            Lifecycle::Live => Ok(()),
            Lifecycle::Ended => Err(EnvError::SteppedAfterEnd),
        }
    }

    pub(crate) fn ensure_reset(self) -> Result<(), EnvError> {
        match self {
            Lifecycle::Fresh => Err(EnvError::NotReset),
            _ => Ok(()),
        }
    }
}

/// Grid direction helper shared by the grid environments: 0 north, 1 east,
/// 2 south, 3 west. North is decreasing `y`.
pub(crate) fn grid_delta(dir: u32) -> (i64, i64) {
    match dir {
        0 => (0, -1),
        1 => (1, 0),
        2 => (0, 1),
        3 => (-1, 0),
        _ => (0, 0),
    }
}
