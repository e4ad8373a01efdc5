//! Perfect grid maze carved by seeded randomized depth-first search.
//!
//! Start is the north-west corner, goal the south-east corner. Every step
//! costs 0.01; entering the goal adds 1.0 and terminates. Episodes are
//! truncated after `4 * width * height` steps.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    grid_delta, Action, ActionSpace, Cell, EnvCapabilities, EnvError, Environment, Lifecycle, Observation,
    ObservationSpace, RenderFrame, RenderMode, Sprite, StepOutcome,
};
use crate::rng::CounterRng;

pub const STEP_COST: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::North, Move::East, Move::South, Move::West];

    pub fn action(self) -> Action {
        Action::discrete(self as u32)
    }

    fn wall_bit(self) -> u8 {
        1 << (self as u8)
    }

    fn opposite(self) -> Move {
        match self {
            Move::North => Move::South,
            Move::East => Move::West,
            Move::South => Move::North,
            Move::West => Move::East,
        }
    }
}

/// Wall layout: `walls[y * width + x]` holds the closed sides of a cell as a
/// bitmask (1 north, 2 east, 4 south, 8 west).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeLayout {
    pub width: u32,
    pub height: u32,
    pub walls: Vec<u8>,
}

impl MazeLayout {
    pub fn generate(width: u32, height: u32, layout_seed: u64) -> Self {
        let n = (width * height) as usize;
        let mut walls = vec![0b1111u8; n];
        let mut visited = vec![false; n];
        let mut rng = CounterRng::new(layout_seed);
        let mut stack = vec![(0u32, 0u32)];
        visited[0] = true;
        while let Some(&(x, y)) = stack.last() {
            let options: Vec<(Move, u32, u32)> = Move::ALL
                .iter()
                .filter_map(|&m| {
                    let (dx, dy) = grid_delta(m as u32);
                    let nx = i64::from(x) + dx;
                    let ny = i64::from(y) + dy;
                    if nx < 0 || ny < 0 || nx >= i64::from(width) || ny >= i64::from(height) {
                        return None;
                    }
                    let (nx, ny) = (nx as u32, ny as u32);
                    (!visited[(ny * width + nx) as usize]).then_some((m, nx, ny))
                })
                .collect();
            if options.is_empty() {
                stack.pop();
                continue;
            }
            let (m, nx, ny) = options[rng.below(options.len() as u64) as usize];
            walls[(y * width + x) as usize] &= !m.wall_bit();
            walls[(ny * width + nx) as usize] &= !m.opposite().wall_bit();
            visited[(ny * width + nx) as usize] = true;
            stack.push((nx, ny));
        }
        Self { width, height, walls }
    }

    pub fn start(&self) -> (u32, u32) {
        (0, 0)
    }

    pub fn goal(&self) -> (u32, u32) {
        (self.width - 1, self.height - 1)
    }

    pub fn is_open(&self, x: u32, y: u32, dir: u32) -> bool {
        self.walls[(y * self.width + x) as usize] & (1 << dir) == 0
    }

    /// Cell reached by moving `dir` from `(x, y)`; walls and borders block.
    pub fn neighbor(&self, x: u32, y: u32, dir: u32) -> (u32, u32) {
        if dir > 3 || !self.is_open(x, y, dir) {
            return (x, y);
        }
        let (dx, dy) = grid_delta(dir);
        ((i64::from(x) + dx) as u32, (i64::from(y) + dy) as u32)
    }

    /// Number of carved passages; a perfect maze has `cells - 1`.
    pub fn passage_count(&self) -> usize {
        let open_sides: u32 = self.walls.iter().map(|w| (!w & 0b1111).count_ones()).sum();
        (open_sides / 2) as usize
    }
}

#[derive(Debug, Clone)]
pub struct GridMaze {
    layout: MazeLayout,
    layout_seed: u64,
    caps: EnvCapabilities,
    pos: (u32, u32),
    steps: u32,
    lifecycle: Lifecycle,
}

impl GridMaze {
    pub fn new(width: u32, height: u32, layout_seed: u64) -> Result<Self, EnvError> {
        if width == 0 || height == 0 || width * height < 2 {
            return Err(EnvError::Config(format!(
                "grid_maze needs at least two cells, got {width}x{height}"
            )));
        }
        if width > 64 || height > 64 {
            return Err(EnvError::Config("grid_maze is limited to 64x64".into()));
        }
        let layout = MazeLayout::generate(width, height, layout_seed);
        let caps = EnvCapabilities {
            num_controllers: 1,
            reward_dims: 1,
            action_spaces: vec![ActionSpace::Discrete { n: 4 }],
            observation_spaces: vec![ObservationSpace::flat(2)],
            render_modes: vec![RenderMode::Grid],
            intentions: false,
        };
        Ok(Self {
            pos: layout.start(),
            layout,
            layout_seed,
            caps,
            steps: 0,
            lifecycle: Lifecycle::Fresh,
        })
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn position(&self) -> (u32, u32) {
        self.pos
    }

    pub fn horizon(&self) -> u32 {
        4 * self.layout.width * self.layout.height
    }

    fn observation(&self) -> Observation {
        Observation::new(vec![f64::from(self.pos.0), f64::from(self.pos.1)])
    }
}

impl Environment for GridMaze {
    fn env_id(&self) -> &str {
        "grid_maze"
    }

    fn capabilities(&self) -> &EnvCapabilities {
        &self.caps
    }

    fn reset(&mut self, _seed: u64) -> Result<Vec<Observation>, EnvError> {
        // The layout seed fixes the maze; the start cell is fixed too, so the
        // reset seed has nothing to randomize.
        self.pos = self.layout.start();
        self.steps = 0;
        self.lifecycle = Lifecycle::Live;
        Ok(vec![self.observation()])
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        self.lifecycle.ensure_steppable()?;
        self.caps.check_joint_action(joint_action)?;
        let dir = joint_action[0].as_discrete().expect("checked discrete");
        self.pos = self.layout.neighbor(self.pos.0, self.pos.1, dir);
        self.steps += 1;
        let terminated = self.pos == self.layout.goal();
        let reward = if terminated { GOAL_REWARD + STEP_COST } else { STEP_COST };
        let truncated = !terminated && self.steps >= self.horizon();
        if terminated || truncated {
            self.lifecycle = Lifecycle::Ended;
        }
        let mut info = std::collections::BTreeMap::new();
        info.insert("steps".to_string(), json!(self.steps));
        Ok(StepOutcome {
            observations: vec![self.observation()],
            rewards: vec![vec![reward]],
            terminated,
            truncated,
            info,
        })
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        self.lifecycle.ensure_reset()?;
        let (w, h) = (self.layout.width, self.layout.height);
        let goal = self.layout.goal();
        let start = self.layout.start();
        let mut cells = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let tag = if (x, y) == goal {
                    "goal"
                } else if (x, y) == start {
                    "start"
                } else {
                    "floor"
                };
                cells.push(Cell {
                    x,
                    y,
                    tag: tag.into(),
                    walls: Some(self.layout.walls[(y * w + x) as usize]),
                    label: None,
                });
            }
        }
        Ok(RenderFrame {
            mode: RenderMode::Grid,
            width: w,
            height: h,
            cells,
            sprites: vec![Sprite {
                x: self.pos.0,
                y: self.pos.1,
                tag: "agent".into(),
                id: None,
            }],
            gauges: vec![],
            overlay_text: vec![format!("step {}", self.steps)],
        })
    }

    fn snapshot(&self) -> Value {
        json!({
            "env": "grid_maze",
            "width": self.layout.width,
            "height": self.layout.height,
            "layout_seed": self.layout_seed,
            "pos": [self.pos.0, self.pos.1],
            "steps": self.steps,
            "lifecycle": self.lifecycle,
        })
    }

    fn markov_key(&self) -> Option<Vec<i64>> {
        Some(vec![i64::from(self.pos.0), i64::from(self.pos.1)])
    }

    fn try_clone(&self) -> Option<Box<dyn Environment>> {
        Some(Box::new(self.clone()))
    }
}
