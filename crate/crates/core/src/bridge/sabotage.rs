//! Deliberately broken environment wrappers. The conformance suite must fail
//! each of them on exactly the contract it breaks.

use serde_json::Value;

use crate::env::{Action, ActionSpace, EnvCapabilities, EnvError, Environment, Observation, RenderFrame, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sabotage {
    /// Offsets every observation by a per-reset amount, so two resets with
    /// one seed disagree.
    NondeterministicReset,
    /// Keeps answering steps after the episode ended.
    StepsAfterEnd,
    /// Replaces out-of-space actions with valid ones instead of rejecting.
    AcceptsInvalidActions,
}

impl Sabotage {
    pub const ALL: [Sabotage; 3] = [
        Sabotage::NondeterministicReset,
        Sabotage::StepsAfterEnd,
        Sabotage::AcceptsInvalidActions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sabotage::NondeterministicReset => "nondeterministic-reset",
            Sabotage::StepsAfterEnd => "steps-after-end",
            Sabotage::AcceptsInvalidActions => "accepts-invalid-actions",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    /// Name of the conformance check this sabotage must fail.
    pub fn breaks(self) -> &'static str {
        match self {
            Sabotage::NondeterministicReset => "determinism",
            Sabotage::StepsAfterEnd => "termination_contract",
            Sabotage::AcceptsInvalidActions => "space_violation",
        }
    }

    pub fn wrap(self, env: Box<dyn Environment>) -> Box<dyn Environment> {
        Box::new(Sabotaged {
            inner: env,
            kind: self,
            resets: 0,
            last: None,
        })
    }
}

struct Sabotaged {
    inner: Box<dyn Environment>,
    kind: Sabotage,
    resets: u64,
    last: Option<StepOutcome>,
}

fn coerce(space: &ActionSpace, action: &Action) -> Action {
    if space.check(action).is_ok() {
        return action.clone();
    }
    match space {
        ActionSpace::Discrete { .. } => Action::discrete(0),
        ActionSpace::Interval { low, .. } => Action(crate::env::Numbers(vec![*low])),
    }
}

impl Sabotaged {
    fn skew(&self, observations: &mut [Observation]) {
        if self.kind == Sabotage::NondeterministicReset {
            let offset = self.resets as f64 * 1e-3;
            for o in observations {
                for x in &mut o.0 .0 {
                    *x += offset;
                }
            }
        }
    }
}

impl Environment for Sabotaged {
    fn env_id(&self) -> &str {
        self.inner.env_id()
    }

    fn capabilities(&self) -> &EnvCapabilities {
        self.inner.capabilities()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        self.resets += 1;
        self.last = None;
        let mut obs = self.inner.reset(seed)?;
        self.skew(&mut obs);
        Ok(obs)
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        match self.kind {
            Sabotage::StepsAfterEnd => {
                if let Some(done) = self.last.as_ref().filter(|o| o.done()) {
                    return Ok(done.clone());
                }
                let out = self.inner.step(joint_action)?;
                self.last = Some(out.clone());
                Ok(out)
            }
            Sabotage::AcceptsInvalidActions => {
                let spaces = &self.inner.capabilities().action_spaces;
                let fixed: Vec<Action> = spaces.iter().zip(joint_action).map(|(s, a)| coerce(s, a)).collect();
                let fixed = if fixed.len() == spaces.len() {
                    fixed
                } else {
                    spaces.iter().map(|s| coerce(s, &Action::default())).collect()
                };
                self.inner.step(&fixed)
            }
            Sabotage::NondeterministicReset => {
                let mut out = self.inner.step(joint_action)?;
                self.skew(&mut out.observations);
                Ok(out)
            }
        }
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        self.inner.render()
    }

    fn snapshot(&self) -> Value {
        self.inner.snapshot()
    }
}
