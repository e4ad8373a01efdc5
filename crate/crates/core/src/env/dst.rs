//! Deep-sea treasure: a submarine trades treasure value against time.
//!
//! Fixture format (`dst v1`): a header line `dst v1`, then one line per
//! seabed column, `col depth value`, whitespace separated. Blank lines and
//! lines starting with `#` are ignored. Every column `0..width` must appear
//! exactly once. In column `c`, rows above `depth` are water, row `depth`
//! holds the treasure, rows below are rock. The submarine starts at the
//! surface of column 0.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    grid_delta, Action, ActionSpace, Cell, EnvCapabilities, EnvError, Environment, Lifecycle, Observation,
    ObservationSpace, RenderFrame, RenderMode, Sprite, StepOutcome,
};

pub const DEFAULT_DST_FIXTURE: &str = include_str!("../../fixtures/dst_default.dst");
pub const DEFAULT_MAX_STEPS: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstFixture {
    /// Treasure row for each column.
    pub depths: Vec<u32>,
    pub values: Vec<f64>,
}

impl DstFixture {
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, "dst v1")) => {}
            Some((n, other)) => return Err(fixture_err(n, format!("expected header `dst v1`, found `{other}`"))),
            None => return Err(fixture_err(0, "empty fixture".into())),
        }
        let mut rows: Vec<(u32, u32, f64)> = Vec::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(fixture_err(n, format!("expected `col depth value`, found `{line}`")));
            }
            let col: u32 = fields[0].parse().map_err(|_| fixture_err(n, "bad column".into()))?;
            let depth: u32 = fields[1].parse().map_err(|_| fixture_err(n, "bad depth".into()))?;
            let value: f64 = fields[2].parse().map_err(|_| fixture_err(n, "bad value".into()))?;
            if depth == 0 {
                return Err(fixture_err(n, "treasure depth must be at least 1".into()));
            }
            if !(value.is_finite() && value > 0.0) {
                return Err(fixture_err(n, "treasure value must be positive".into()));
            }
            if rows.iter().any(|r| r.0 == col) {
                return Err(fixture_err(n, format!("column {col} listed twice")));
            }
            rows.push((col, depth, value));
        }
        if rows.is_empty() {
            return Err(fixture_err(0, "no treasure rows".into()));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 as usize != i) {
            return Err(fixture_err(0, "columns must cover 0..width without gaps".into()));
        }
        if rows.len() > 64 || rows.iter().any(|r| r.1 > 64) {
            return Err(fixture_err(0, "grid is limited to 64x64".into()));
        }
        Ok(Self {
            depths: rows.iter().map(|r| r.1).collect(),
            values: rows.iter().map(|r| r.2).collect(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("dst v1\n");
        for (c, (d, v)) in self.depths.iter().zip(&self.values).enumerate() {
            out.push_str(&format!("{c} {d} {v}\n"));
        }
        out
    }

    pub fn width(&self) -> u32 {
        self.depths.len() as u32
    }

    pub fn height(&self) -> u32 {
        self.depths.iter().max().copied().unwrap_or(0) + 1
    }

    pub fn is_rock(&self, x: u32, y: u32) -> bool {
        y > self.depths[x as usize]
    }

    pub fn treasure_at(&self, x: u32, y: u32) -> Option<f64> {
        (y == self.depths[x as usize]).then(|| self.values[x as usize])
    }
}

fn fixture_err(line: usize, msg: String) -> EnvError {
    EnvError::Config(format!("dst fixture line {line}: {msg}"))
}

#[derive(Debug, Clone)]
pub struct DeepSeaTreasure {
    fixture: DstFixture,
    caps: EnvCapabilities,
    max_steps: u32,
    pos: (u32, u32),
    steps: u32,
    lifecycle: Lifecycle,
}

impl DeepSeaTreasure {
    pub fn new(fixture: DstFixture, max_steps: u32) -> Result<Self, EnvError> {
        if max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        Ok(Self {
            fixture,
            caps: EnvCapabilities {
                num_controllers: 1,
                reward_dims: 2,
                action_spaces: vec![ActionSpace::Discrete { n: 4 }],
                observation_spaces: vec![ObservationSpace::flat(2)],
                render_modes: vec![RenderMode::Grid],
                intentions: false,
            },
            max_steps,
            pos: (0, 0),
            steps: 0,
            lifecycle: Lifecycle::Fresh,
        })
    }

    pub fn default_fixture() -> Self {
        let fixture = DstFixture::parse(DEFAULT_DST_FIXTURE).expect("bundled fixture parses");
        Self::new(fixture, DEFAULT_MAX_STEPS).expect("valid defaults")
    }

    pub fn fixture(&self) -> &DstFixture {
        &self.fixture
    }

    pub fn position(&self) -> (u32, u32) {
        self.pos
    }

    fn observation(&self) -> Observation {
        Observation::new(vec![f64::from(self.pos.0), f64::from(self.pos.1)])
    }
}

impl Environment for DeepSeaTreasure {
    fn env_id(&self) -> &str {
        "deep_sea_treasure"
    }

    fn capabilities(&self) -> &EnvCapabilities {
        &self.caps
    }

    fn reset(&mut self, _seed: u64) -> Result<Vec<Observation>, EnvError> {
        self.pos = (0, 0);
        self.steps = 0;
        self.lifecycle = Lifecycle::Live;
        Ok(vec![self.observation()])
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        self.lifecycle.ensure_steppable()?;
        self.caps.check_joint_action(joint_action)?;
        let (dx, dy) = grid_delta(joint_action[0].as_discrete().expect("checked discrete"));
        let nx = i64::from(self.pos.0) + dx;
        let ny = i64::from(self.pos.1) + dy;
        if nx >= 0 && ny >= 0 && nx < i64::from(self.fixture.width()) && ny < i64::from(self.fixture.height()) {
            let (nx, ny) = (nx as u32, ny as u32);
            if !self.fixture.is_rock(nx, ny) {
                self.pos = (nx, ny);
            }
        }
        self.steps += 1;
        let treasure = self.fixture.treasure_at(self.pos.0, self.pos.1);
        let terminated = treasure.is_some();
        let truncated = !terminated && self.steps >= self.max_steps;
        if terminated || truncated {
            self.lifecycle = Lifecycle::Ended;
        }
        Ok(StepOutcome {
            observations: vec![self.observation()],
            rewards: vec![vec![treasure.unwrap_or(0.0), -1.0]],
            terminated,
            truncated,
            info: [("steps".to_string(), json!(self.steps))].into_iter().collect(),
        })
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        self.lifecycle.ensure_reset()?;
        let (w, h) = (self.fixture.width(), self.fixture.height());
        let mut cells = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let (tag, label) = match self.fixture.treasure_at(x, y) {
                    Some(v) => ("treasure", Some(format!("{v}"))),
                    None if self.fixture.is_rock(x, y) => ("rock", None),
                    None => ("water", None),
                };
                cells.push(Cell {
                    x,
                    y,
                    tag: tag.into(),
                    walls: None,
                    label,
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
            "env": "deep_sea_treasure",
            "depths": self.fixture.depths,
            "values": self.fixture.values,
            "max_steps": self.max_steps,
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

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Minimal steps from the start to every open cell (BFS oracle).
    fn bfs(f: &DstFixture) -> Vec<Vec<Option<u32>>> {
        let (w, h) = (f.width(), f.height());
        let mut dist = vec![vec![None; w as usize]; h as usize];
        dist[0][0] = Some(0);
        let mut q = VecDeque::from([(0u32, 0u32)]);
        while let Some((x, y)) = q.pop_front() {
            let d = dist[y as usize][x as usize].unwrap();
            if f.treasure_at(x, y).is_some() {
                continue;
            }
            for dir in 0..4 {
                let (dx, dy) = grid_delta(dir);
                let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                if nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h) {
                    continue;
                }
                let (nx, ny) = (nx as u32, ny as u32);
                if f.is_rock(nx, ny) || dist[ny as usize][nx as usize].is_some() {
                    continue;
                }
                dist[ny as usize][nx as usize] = Some(d + 1);
                q.push_back((nx, ny));
            }
        }
        dist
    }

    #[test]
    fn default_fixture_golden() {
        let f = DstFixture::parse(DEFAULT_DST_FIXTURE).unwrap();
        assert_eq!(f.depths, vec![1, 2, 3, 4, 4, 4, 7, 7, 9, 10]);
        assert_eq!(f.values, vec![1.0, 2.0, 3.0, 5.0, 8.0, 16.0, 24.0, 50.0, 74.0, 124.0]);
        assert_eq!((f.width(), f.height()), (10, 11));
        assert_eq!(f.to_text(), DEFAULT_DST_FIXTURE);
    }

    #[test]
    fn every_treasure_is_a_single_reachable_terminal_cell() {
        let f = DstFixture::parse(DEFAULT_DST_FIXTURE).unwrap();
        let dist = bfs(&f);
        for x in 0..f.width() {
            let terminal_cells = (0..f.height()).filter(|&y| f.treasure_at(x, y).is_some()).count();
            assert_eq!(terminal_cells, 1);
            assert!(dist[f.depths[x as usize] as usize][x as usize].is_some());
        }
    }

    #[test]
    fn nearest_treasure_returns_value_and_time() {
        let f = DstFixture::parse(DEFAULT_DST_FIXTURE).unwrap();
        let t = bfs(&f)[1][0].unwrap();
        let mut env = DeepSeaTreasure::default_fixture();
        env.reset(0).unwrap();
        let out = env.step(&[Action::discrete(2)]).unwrap();
        assert!(out.terminated);
        assert_eq!(out.rewards[0], vec![1.0, -1.0]);
        assert_eq!(t, 1);
        assert_eq!(env.step(&[Action::discrete(0)]), Err(EnvError::SteppedAfterEnd));
    }

    #[test]
    fn shortest_path_to_far_treasure() {
        let f = DstFixture::parse(DEFAULT_DST_FIXTURE).unwrap();
        let t = bfs(&f)[10][9].unwrap();
        assert_eq!(t, 19);
        let mut env = DeepSeaTreasure::default_fixture();
        env.reset(0).unwrap();
        let mut ret = [0.0, 0.0];
        let script: Vec<u32> = std::iter::repeat_n(1, 9).chain(std::iter::repeat_n(2, 10)).collect();
        for (i, a) in script.iter().enumerate() {
            let out = env.step(&[Action::discrete(*a)]).unwrap();
            ret[0] += out.rewards[0][0];
            ret[1] += out.rewards[0][1];
            assert_eq!(out.terminated, i + 1 == script.len());
        }
        assert_eq!(ret, [124.0, -(t as f64)]);
    }

    #[test]
    fn rock_blocks_movement() {
        let mut env = DeepSeaTreasure::default_fixture();
        env.reset(0).unwrap();
        // Column 5's treasure sits at depth 4, so (5, 5) is rock.
        for a in [1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2] {
            env.step(&[Action::discrete(a)]).unwrap();
        }
        assert_eq!(env.position(), (6, 5));
        let out = env.step(&[Action::discrete(3)]).unwrap();
        assert_eq!(env.position(), (6, 5));
        assert!(!out.terminated);
    }

    #[test]
    fn fixture_errors() {
        assert!(DstFixture::parse("").is_err());
        assert!(DstFixture::parse("dst v2\n0 1 1\n").is_err());
        assert!(DstFixture::parse("dst v1\n0 1\n").is_err());
        assert!(DstFixture::parse("dst v1\n0 0 1\n").is_err());
        assert!(DstFixture::parse("dst v1\n0 1 1\n2 1 1\n").is_err());
        assert!(DstFixture::parse("dst v1\n0 1 1\n0 2 1\n").is_err());
        assert!(DstFixture::parse("dst v1\n# comment\n\n0 1 -3\n").is_err());
        assert!(DstFixture::parse("dst v1\n# comment\n\n0 1 3\n").is_ok());
    }
}
