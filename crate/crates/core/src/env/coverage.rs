//! Cooperative landmark coverage on a square grid.
//!
//! `n` controllers must jointly occupy `n` landmarks. All controllers share
//! the per-step reward `-(uncovered landmarks) / n`. Controllers may declare
//! which landmark they intend to cover; declarations are echoed in
//! `info["intentions"]`.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::{
    grid_delta, Action, ActionSpace, Cell, EnvCapabilities, EnvError, Environment, Lifecycle, Observation,
    ObservationSpace, RenderFrame, RenderMode, Sprite, StepOutcome,
};
use crate::rng::CounterRng;

pub const DEFAULT_GRID: u32 = 7;
pub const MAX_STEPS: u32 = 100;
/// Action index for staying in place; 0..4 are north, east, south, west.
pub const STAY: u32 = 4;

#[derive(Debug, Clone)]
pub struct CoverageTeam {
    n: u32,
    k: u32,
    caps: EnvCapabilities,
    agents: Vec<(u32, u32)>,
    landmarks: Vec<(u32, u32)>,
    intentions: Vec<Option<u32>>,
    steps: u32,
    lifecycle: Lifecycle,
}

impl CoverageTeam {
    pub fn new(n: u32, k: u32) -> Result<Self, EnvError> {
        if n == 0 {
            return Err(EnvError::Config("coverage_team needs at least one controller".into()));
        }
        if k == 0 || k > 64 || 2 * n > k * k {
            return Err(EnvError::Config(format!(
                "grid {k}x{k} cannot hold {n} agents and {n} landmarks on distinct cells"
            )));
        }
        let obs_len = 2 + 2 * n + 2 * (n - 1);
        let caps = EnvCapabilities {
            num_controllers: n,
            reward_dims: 1,
            action_spaces: vec![ActionSpace::Discrete { n: 5 }; n as usize],
            observation_spaces: vec![ObservationSpace::flat(obs_len); n as usize],
            render_modes: vec![RenderMode::Grid],
            intentions: true,
        };
        Ok(Self {
            n,
            k,
            caps,
            agents: vec![(0, 0); n as usize],
            landmarks: vec![(0, 0); n as usize],
            intentions: vec![None; n as usize],
            steps: 0,
            lifecycle: Lifecycle::Fresh,
        })
    }

    /// Starts a live episode from explicit positions.
    pub fn with_positions(k: u32, agents: Vec<(u32, u32)>, landmarks: Vec<(u32, u32)>) -> Result<Self, EnvError> {
        if agents.len() != landmarks.len() {
            return Err(EnvError::Config("agent and landmark counts differ".into()));
        }
        let mut env = Self::new(agents.len() as u32, k)?;
        if agents.iter().chain(&landmarks).any(|&(x, y)| x >= k || y >= k) {
            return Err(EnvError::Config("position outside grid".into()));
        }
        env.agents = agents;
        env.landmarks = landmarks;
        env.lifecycle = Lifecycle::Live;
        Ok(env)
    }

    pub fn agents(&self) -> &[(u32, u32)] {
        &self.agents
    }

    pub fn landmarks(&self) -> &[(u32, u32)] {
        &self.landmarks
    }

    pub fn uncovered(&self) -> usize {
        self.landmarks.iter().filter(|l| !self.agents.contains(l)).count()
    }

    fn observation_for(&self, i: usize) -> Observation {
        let mut v = Vec::with_capacity(2 + 4 * self.n as usize);
        let (x, y) = self.agents[i];
        v.extend([f64::from(x), f64::from(y)]);
        for &(lx, ly) in &self.landmarks {
            v.extend([f64::from(lx), f64::from(ly)]);
        }
        for (j, &(ax, ay)) in self.agents.iter().enumerate() {
            if j != i {
                v.extend([f64::from(ax), f64::from(ay)]);
            }
        }
        Observation::new(v)
    }

    fn observations(&self) -> Vec<Observation> {
        (0..self.n as usize).map(|i| self.observation_for(i)).collect()
    }

    fn intentions_value(&self) -> Value {
        Value::Array(self.intentions.iter().map(|t| json!(t)).collect())
    }
}

impl Environment for CoverageTeam {
    fn env_id(&self) -> &str {
        "coverage_team"
    }

    fn capabilities(&self) -> &EnvCapabilities {
        &self.caps
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        let mut rng = CounterRng::new(seed);
        let mut cells: Vec<(u32, u32)> = (0..self.k).flat_map(|y| (0..self.k).map(move |x| (x, y))).collect();
        rng.shuffle(&mut cells);
        let n = self.n as usize;
        self.landmarks = cells[..n].to_vec();
        self.agents = cells[n..2 * n].to_vec();
        self.intentions = vec![None; n];
        self.steps = 0;
        self.lifecycle = Lifecycle::Live;
        Ok(self.observations())
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        self.lifecycle.ensure_steppable()?;
        self.caps.check_joint_action(joint_action)?;
        for (pos, action) in self.agents.iter_mut().zip(joint_action) {
            let dir = action.as_discrete().expect("checked discrete");
            if dir == STAY {
                continue;
            }
            let (dx, dy) = grid_delta(dir);
            let nx = i64::from(pos.0) + dx;
            let ny = i64::from(pos.1) + dy;
            if nx >= 0 && ny >= 0 && nx < i64::from(self.k) && ny < i64::from(self.k) {
                *pos = (nx as u32, ny as u32);
            }
        }
        self.steps += 1;
        let uncovered = self.uncovered();
        let reward = -(uncovered as f64) / f64::from(self.n);
        let terminated = uncovered == 0;
        let truncated = !terminated && self.steps >= MAX_STEPS;
        if terminated || truncated {
            self.lifecycle = Lifecycle::Ended;
        }
        let mut info = BTreeMap::new();
        info.insert("intentions".to_string(), self.intentions_value());
        info.insert("steps".to_string(), json!(self.steps));
        Ok(StepOutcome {
            observations: self.observations(),
            rewards: vec![vec![reward]; self.n as usize],
            terminated,
            truncated,
            info,
        })
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        self.lifecycle.ensure_reset()?;
        let mut cells = Vec::with_capacity((self.k * self.k) as usize);
        for y in 0..self.k {
            for x in 0..self.k {
                let landmark = self.landmarks.iter().position(|&l| l == (x, y));
                cells.push(Cell {
                    x,
                    y,
                    tag: if landmark.is_some() { "landmark" } else { "floor" }.into(),
                    walls: None,
                    label: landmark.map(|i| i.to_string()),
                });
            }
        }
        let sprites = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Sprite {
                x,
                y,
                tag: "agent".into(),
                id: Some(i as u32),
            })
            .collect();
        let overlay_text = self
            .intentions
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| format!("agent {i} -> landmark {t}")))
            .collect();
        Ok(RenderFrame {
            mode: RenderMode::Grid,
            width: self.k,
            height: self.k,
            cells,
            sprites,
            gauges: vec![],
            overlay_text,
        })
    }

    fn snapshot(&self) -> Value {
        json!({
            "env": "coverage_team",
            "n": self.n,
            "k": self.k,
            "agents": self.agents,
            "landmarks": self.landmarks,
            "intentions": self.intentions,
            "steps": self.steps,
            "lifecycle": self.lifecycle,
        })
    }

    fn declare_intention(&mut self, controller: usize, target: Option<u32>) -> Result<(), EnvError> {
        if controller >= self.n as usize {
            return Err(EnvError::SpaceViolation {
                controller,
                reason: "no such controller".into(),
            });
        }
        if let Some(t) = target {
            if t >= self.n {
                return Err(EnvError::SpaceViolation {
                    controller,
                    reason: format!("landmark {t} does not exist"),
                });
            }
        }
        self.intentions[controller] = target;
        Ok(())
    }

    fn markov_key(&self) -> Option<Vec<i64>> {
        Some(
            self.agents
                .iter()
                .chain(&self.landmarks)
                .flat_map(|&(x, y)| [i64::from(x), i64::from(y)])
                .collect(),
        )
    }

    fn try_clone(&self) -> Option<Box<dyn Environment>> {
        Some(Box::new(self.clone()))
    }
}
