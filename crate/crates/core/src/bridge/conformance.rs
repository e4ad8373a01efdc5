//! Behavioural checks for any environment, bridged or native.

use std::fmt;

use crate::env::{Action, ActionSpace, EnvError, Environment, Numbers, StepOutcome};
use crate::hash::canonical_of;
use crate::rng::CounterRng;

/// Step budget for the termination check; every shipped environment
/// truncates well before this.
const TERMINATION_BUDGET: usize = 10_000;
const DETERMINISM_STEPS: usize = 200;
const DETERMINISM_SEEDS: [u64; 3] = [0, 7, 123_456_789];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{verdict} {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn random_action(space: &ActionSpace, rng: &mut CounterRng) -> Action {
    match space {
        ActionSpace::Discrete { n } => Action::discrete(rng.below(u64::from(*n)) as u32),
        ActionSpace::Interval { low, high } => Action(Numbers(vec![low + (high - low) * rng.next_f64()])),
    }
}

fn invalid_action(space: &ActionSpace) -> Action {
    match space {
        ActionSpace::Discrete { n } => Action::discrete(*n),
        ActionSpace::Interval { high, .. } => Action(Numbers(vec![high + 1.0])),
    }
}

fn joint(env: &dyn Environment, rng: &mut CounterRng) -> Vec<Action> {
    env.capabilities()
        .action_spaces
        .iter()
        .map(|s| random_action(s, rng))
        .collect()
}

/// Canonical text of one scripted episode prefix.
fn scripted_run(env: &mut dyn Environment, seed: u64) -> Result<String, EnvError> {
    let mut rng = CounterRng::new(seed ^ 0x5eed);
    let mut out = canonical_of(&env.reset(seed)?);
    for _ in 0..DETERMINISM_STEPS {
        let a = joint(env, &mut rng);
        let step: StepOutcome = env.step(&a)?;
        out.push('\n');
        out.push_str(&canonical_of(&step));
        if step.done() {
            break;
        }
    }
    Ok(out)
}

fn determinism(env: &mut dyn Environment) -> CheckResult {
    let mut detail = String::from("identical outcomes for repeated seeds");
    let mut passed = true;
    for seed in DETERMINISM_SEEDS {
        let runs = (scripted_run(env, seed), scripted_run(env, seed));
        match runs {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(a), Ok(b)) => {
                let line = a.lines().zip(b.lines()).position(|(x, y)| x != y).unwrap_or(0);
                detail = format!("seed {seed}: runs differ at step {line}");
                passed = false;
                break;
            }
            (Err(e), _) | (_, Err(e)) => {
                detail = format!("seed {seed}: {e}");
                passed = false;
                break;
            }
        }
    }
    CheckResult {
        name: "determinism",
        passed,
        detail,
    }
}

fn space_violation(env: &mut dyn Environment) -> CheckResult {
    let fail = |detail: String| CheckResult {
        name: "space_violation",
        passed: false,
        detail,
    };
    if let Err(e) = env.reset(11) {
        return fail(format!("reset failed: {e}"));
    }
    let mut rng = CounterRng::new(11);
    let spaces = env.capabilities().action_spaces.clone();
    for (c, space) in spaces.iter().enumerate() {
        let mut a = joint(env, &mut rng);
        a[c] = invalid_action(space);
        match env.step(&a) {
            Err(EnvError::SpaceViolation { controller, .. }) if controller == c => {}
            Err(e) => return fail(format!("controller {c}: expected a space violation, got `{e}`")),
            Ok(_) => return fail(format!("controller {c}: out-of-space action {:?} was accepted", a[c].values())),
        }
    }
    let mut short = joint(env, &mut rng);
    short.pop();
    if !matches!(env.step(&short), Err(EnvError::SpaceViolation { .. })) {
        return fail("a joint action with a missing entry was not rejected".into());
    }
    let a = joint(env, &mut rng);
    if let Err(e) = env.step(&a) {
        return fail(format!("valid step after rejections failed: {e}"));
    }
    CheckResult {
        name: "space_violation",
        passed: true,
        detail: format!("{} controller(s) reject out-of-space actions", spaces.len()),
    }
}

fn termination(env: &mut dyn Environment) -> CheckResult {
    let fail = |detail: String| CheckResult {
        name: "termination_contract",
        passed: false,
        detail,
    };
    if let Err(e) = env.reset(3) {
        return fail(format!("reset failed: {e}"));
    }
    let mut rng = CounterRng::new(3);
    let mut steps = 0;
    loop {
        let a = joint(env, &mut rng);
        match env.step(&a) {
            Ok(o) if o.done() => break,
            Ok(_) => {}
            Err(e) => return fail(format!("step {steps} failed: {e}")),
        }
        steps += 1;
        if steps >= TERMINATION_BUDGET {
            return fail(format!("no termination or truncation within {TERMINATION_BUDGET} steps"));
        }
    }
    let a = joint(env, &mut rng);
    match env.step(&a) {
        Err(EnvError::SteppedAfterEnd) => {}
        Err(e) => return fail(format!("step after end gave `{e}` instead of SteppedAfterEnd")),
        Ok(_) => return fail("step after the episode ended was accepted".into()),
    }
    if let Err(e) = env.reset(4).and_then(|_| env.step(&joint(env, &mut rng))) {
        return fail(format!("reset after end did not revive the env: {e}"));
    }
    CheckResult {
        name: "termination_contract",
        passed: true,
        detail: format!("ended after {} steps; later steps refused", steps + 1),
    }
}

fn render(env: &mut dyn Environment) -> CheckResult {
    let result = env.reset(5).and_then(|_| env.render());
    let (passed, detail) = match result {
        Ok(f) if !env.capabilities().render_modes.contains(&f.mode) => (false, format!("undeclared mode {:?}", f.mode)),
        Ok(f) if !f.coordinates_in_bounds() => (false, "frame has out-of-bounds coordinates".into()),
        Ok(f) => (true, format!("{:?} frame {}x{}", f.mode, f.width, f.height)),
        Err(e) => (false, e.to_string()),
    };
    CheckResult {
        name: "render",
        passed,
        detail,
    }
}

/// Runs every check and reports each one; later checks still run after a
/// failure so a report always names every contract.
pub fn conformance_suite(env: &mut dyn Environment) -> ConformanceReport {
    let caps = match env.capabilities().validate() {
        Ok(()) => CheckResult {
            name: "capabilities",
            passed: true,
            detail: format!(
                "{} controller(s), {} reward dim(s)",
                env.capabilities().num_controllers,
                env.capabilities().reward_dims
            ),
        },
        Err(e) => CheckResult {
            name: "capabilities",
            passed: false,
            detail: e,
        },
    };
    ConformanceReport {
        checks: vec![caps, determinism(env), space_violation(env), termination(env), render(env)],
    }
}
