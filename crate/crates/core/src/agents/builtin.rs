//! Agents that run inside the session loop and act synchronously at each
//! tick release.
//!
//! Per tick the session calls, for every agent: [`BuiltinAgent::prepare`]
//! with the agent's own controller, [`BuiltinAgent::commit`] to apply the
//! previous step's learning update, then [`BuiltinAgent::act`] for each
//! controller it currently drives, and after the environment step
//! [`BuiltinAgent::record`]. Learning is deferred to the next `commit` so
//! annotations that arrive after a step's broadcast can still be credited.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use super::{
    enumerate_pareto_front, fit_reward_model, pairs_from_ranking, select_by_utility, shape_reward, AgentError,
    Annotation, OneHotFeatures, ParetoFront, Preferred, QTable, StateEncoder, Trajectory, TrajectoryStep,
};
use crate::config::{AgentDef, ExperimentDef, RoleDef};
use crate::env::coverage::STAY;
use crate::env::{make_env, Action, ActionSpace, EnvCapabilities, Environment, Observation};
use crate::protocol::{ControllerKind, TrajectoryDescriptor};
use crate::rng::CounterRng;

pub const ALGORITHMS: [&str; 4] = ["q_learning", "greedy_cover", "pareto_presenter", "random"];

pub struct AgentContext<'a> {
    pub env: &'a dyn Environment,
    pub observation: &'a Observation,
    pub controller: u32,
    /// Info map of the latest step; empty at episode start.
    pub info: &'a BTreeMap<String, Value>,
    pub episode: u32,
    /// Steps taken so far in this episode.
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentChoice {
    pub action: Action,
    pub intention: Option<u32>,
}

/// One applied temporal-difference update, logged as a `LearnerUpdate` event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerUpdate {
    pub state: String,
    pub action: u32,
    pub env_reward: f64,
    pub shaped_reward: f64,
    pub annotations: Vec<Annotation>,
    pub q_before: f64,
    pub q_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shaping {
    pub beta: f64,
    pub window_ms: u64,
}

pub trait BuiltinAgent: Send {
    fn algorithm(&self) -> &'static str;

    fn prepare(&mut self, _ctx: &AgentContext<'_>) {}

    fn commit(&mut self, _annotations: &[Annotation], _shaping: Option<Shaping>) -> Option<LearnerUpdate> {
        None
    }

    fn act(&mut self, ctx: &AgentContext<'_>, rng: &mut CounterRng) -> AgentChoice;

    fn record(&mut self, _taken: &Action, _reward: &[f64], _after: &AgentContext<'_>, _terminal: bool) {}

    /// Role this agent would like to hand its controller to, if any.
    fn delegation_wanted(&self) -> Option<&str> {
        None
    }

    /// Items for a preference query, issued once when the session starts.
    fn preference_items(&mut self, _env: &dyn Environment, _include_frames: bool) -> Result<Vec<TrajectoryDescriptor>, AgentError> {
        Ok(Vec::new())
    }

    fn preference_feedback(&mut self, _ranking: &[String], _fit: Option<(u32, f64)>) {}

    /// Learner state folded into per-tick state hashes.
    fn state(&self) -> Value;
}

/// Whether an algorithm consumes reward annotations.
pub fn accepts_annotations(algorithm: &str) -> bool {
    algorithm == "q_learning"
}

struct Params<'a> {
    map: &'a BTreeMap<String, Value>,
    issues: Vec<(String, String)>,
}

impl<'a> Params<'a> {
    fn new(map: &'a BTreeMap<String, Value>, allowed: &[&str]) -> Self {
        let issues = map
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .map(|k| (format!("params.{k}"), "unknown parameter".to_string()))
            .collect();
        Self { map, issues }
    }

    fn f64(&mut self, key: &str, default: f64) -> f64 {
        match self.map.get(key) {
            None => default,
            Some(v) => v.as_f64().unwrap_or_else(|| {
                self.issues.push((format!("params.{key}"), "must be a number".into()));
                default
            }),
        }
    }

    fn opt_f64(&mut self, key: &str) -> Option<f64> {
        self.map.get(key).map(|_| self.f64(key, 0.0))
    }

    fn u32(&mut self, key: &str, default: u32) -> u32 {
        match self.map.get(key) {
            None => default,
            Some(v) => v.as_u64().and_then(|x| u32::try_from(x).ok()).unwrap_or_else(|| {
                self.issues.push((format!("params.{key}"), "must be a non-negative integer".into()));
                default
            }),
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.map.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.issues.push((format!("params.{key}"), "must be a string".into()));
                None
            }
        }
    }

    fn f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        let v = self.map.get(key)?;
        match v.as_array().map(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>()) {
            Some(Some(list)) => Some(list),
            _ => {
                self.issues.push((format!("params.{key}"), "must be a list of numbers".into()));
                None
            }
        }
    }

    fn fail(&mut self, key: &str, message: impl Into<String>) {
        self.issues.push((key.to_string(), message.into()));
    }
}

#[derive(Debug, Clone)]
struct QParams {
    alpha: f64,
    gamma: f64,
    epsilon: f64,
    encoder: StateEncoder,
    delegate_margin: Option<f64>,
    delegate_to: Option<String>,
}

fn q_params(p: &mut Params<'_>, env_has_key: bool) -> QParams {
    let alpha = p.f64("alpha", 0.5);
    let gamma = p.f64("gamma", 0.99);
    let epsilon = p.f64("epsilon", 0.1);
    let encoder = match p.string("encoder").as_deref() {
        None if env_has_key => StateEncoder::EnvKey,
        Some("env_key") => {
            if !env_has_key {
                p.fail("params.encoder", "environment exposes no Markov key; use `bins`");
            }
            StateEncoder::EnvKey
        }
        None | Some("bins") => StateEncoder::mountain_car(p.u32("bins", 12)),
        Some(other) => {
            p.fail("params.encoder", format!("unknown encoder `{other}`"));
            StateEncoder::EnvKey
        }
    };
    if let Err(e) = QTable::new(1, alpha, gamma, epsilon) {
        p.fail("params", e.to_string());
    }
    QParams {
        alpha,
        gamma,
        epsilon,
        encoder,
        delegate_margin: p.opt_f64("delegate_margin"),
        delegate_to: p.string("delegate_to"),
    }
}

/// Validation issues as `(field path relative to agents.<role>, message)`.
pub fn validate_agent(
    agent: &AgentDef,
    role: &RoleDef,
    caps: &EnvCapabilities,
    def: &ExperimentDef,
) -> Vec<(String, String)> {
    let mut issues = Vec::new();
    if !ALGORITHMS.contains(&agent.algorithm.as_str()) {
        issues.push((
            "algorithm".into(),
            format!("unknown algorithm `{}`; expected one of {}", agent.algorithm, ALGORITHMS.join(", ")),
        ));
        return issues;
    }
    let Some(controls) = role.controls else {
        issues.push(("".into(), format!("algorithm `{}` needs a role that controls the environment", agent.algorithm)));
        return issues;
    };
    let space = caps.action_spaces.get(controls as usize);
    if !matches!(space, Some(ActionSpace::Discrete { .. })) {
        issues.push(("algorithm".into(), "built-in agents need a discrete action space".into()));
    }
    match agent.algorithm.as_str() {
        "q_learning" => {
            let env_has_key = make_env(&def.env)
                .ok()
                .and_then(|mut e| e.reset(0).ok().map(|_| e.markov_key().is_some()))
                .unwrap_or(false);
            let mut p = Params::new(
                &agent.params,
                &["alpha", "gamma", "epsilon", "encoder", "bins", "delegate_margin", "delegate_to"],
            );
            let q = q_params(&mut p, env_has_key);
            if caps.reward_dims != 1 {
                p.fail("algorithm", "q_learning needs a single reward dimension");
            }
            if q.delegate_margin.is_some() != q.delegate_to.is_some() {
                p.fail("params", "delegate_margin and delegate_to go together");
            }
            if let Some(to) = &q.delegate_to {
                if !def.role(to).is_some_and(|r| r.controller_kind == ControllerKind::Human) {
                    p.fail("params.delegate_to", format!("`{to}` is not a human role"));
                }
            }
            issues.extend(p.issues);
        }
        "greedy_cover" => {
            let p = Params::new(&agent.params, &[]);
            issues.extend(p.issues);
            if def.env.id != "coverage_team" {
                issues.push(("algorithm".into(), "greedy_cover only plays coverage_team".into()));
            }
        }
        "pareto_presenter" => {
            let mut p = Params::new(&agent.params, &["horizon", "default_weights", "max_items"]);
            p.u32("horizon", 25);
            p.u32("max_items", 10);
            if let Some(w) = p.f64_list("default_weights") {
                if w.len() != caps.reward_dims as usize || w.iter().any(|x| *x < 0.0) {
                    p.fail("params.default_weights", "needs one non-negative weight per objective");
                }
            }
            if caps.reward_dims < 2 {
                p.fail("algorithm", "pareto_presenter needs a multi-objective environment");
            }
            if caps.num_controllers != 1 {
                p.fail("algorithm", "pareto_presenter needs a single-controller environment");
            }
            if !def.preferences.enabled {
                p.fail("algorithm", "pareto_presenter requires preferences.enabled");
            }
            issues.extend(p.issues);
        }
        "random" => issues.extend(Params::new(&agent.params, &[]).issues),
        _ => unreachable!("checked against ALGORITHMS"),
    }
    issues
}

pub fn build_agent(def: &ExperimentDef, role: &RoleDef, caps: &EnvCapabilities) -> Result<Box<dyn BuiltinAgent>, AgentError> {
    let agent = def
        .agents
        .get(&role.name)
        .ok_or_else(|| AgentError::InvalidParameter(format!("no agent definition for `{}`", role.name)))?;
    let issues = validate_agent(agent, role, caps, def);
    if let Some((field, msg)) = issues.first() {
        return Err(AgentError::InvalidParameter(format!("agents.{}.{field}: {msg}", role.name)));
    }
    let controls = role.controls.expect("validated");
    let arity = caps.action_spaces[controls as usize].discrete_arity().expect("validated");
    Ok(match agent.algorithm.as_str() {
        "q_learning" => {
            let env_has_key = make_env(&def.env)
                .ok()
                .and_then(|mut e| e.reset(0).ok().map(|_| e.markov_key().is_some()))
                .unwrap_or(false);
            let q = q_params(&mut Params::new(&agent.params, &[]), env_has_key);
            Box::new(QLearner {
                table: QTable::new(arity, q.alpha, q.gamma, q.epsilon)?,
                encoder: q.encoder,
                margin: q.delegate_margin.zip(q.delegate_to),
                key: None,
                pending: None,
                wants_delegation: false,
            })
        }
        "greedy_cover" => Box::new(GreedyCover),
        "pareto_presenter" => {
            let mut p = Params::new(&agent.params, &[]);
            Box::new(ParetoPresenter::new(
                p.u32("horizon", 25),
                p.u32("max_items", 10),
                p.f64_list("default_weights")
                    .unwrap_or_else(|| vec![1.0 / f64::from(caps.reward_dims); caps.reward_dims as usize]),
            ))
        }
        "random" => Box::new(RandomAgent { arity }),
        other => return Err(AgentError::InvalidParameter(format!("unknown algorithm `{other}`"))),
    })
}

// ---------------------------------------------------------------------------

struct Pending {
    state: String,
    action: u32,
    reward: f64,
    next: String,
    terminal: bool,
}

struct QLearner {
    table: QTable,
    encoder: StateEncoder,
    margin: Option<(f64, String)>,
    key: Option<String>,
    pending: Option<Pending>,
    wants_delegation: bool,
}

impl BuiltinAgent for QLearner {
    fn algorithm(&self) -> &'static str {
        "q_learning"
    }

    fn prepare(&mut self, ctx: &AgentContext<'_>) {
        self.key = Some(self.encoder.encode(ctx.env, ctx.observation));
    }

    fn commit(&mut self, annotations: &[Annotation], shaping: Option<Shaping>) -> Option<LearnerUpdate> {
        let p = self.pending.take()?;
        let shaped = match shaping {
            Some(s) => shape_reward(p.reward, annotations, s.beta, s.window_ms),
            None => p.reward,
        };
        let before = self.table.get(&p.state, p.action);
        self.table.q_update(&p.state, p.action, shaped, &p.next, p.terminal);
        let update = LearnerUpdate {
            q_before: before,
            q_after: self.table.get(&p.state, p.action),
            state: p.state,
            action: p.action,
            env_reward: p.reward,
            shaped_reward: shaped,
            annotations: if shaping.is_some() { annotations.to_vec() } else { Vec::new() },
        };
        // The margin trigger looks at the state about to be acted in.
        self.wants_delegation = match (&self.margin, &self.key) {
            (Some((threshold, _)), Some(key)) => self.table.margin(key) < *threshold,
            _ => false,
        };
        Some(update)
    }

    fn act(&mut self, ctx: &AgentContext<'_>, rng: &mut CounterRng) -> AgentChoice {
        let key = self.encoder.encode(ctx.env, ctx.observation);
        AgentChoice {
            action: Action::discrete(self.table.sample(&key, rng)),
            intention: None,
        }
    }

    fn record(&mut self, taken: &Action, reward: &[f64], after: &AgentContext<'_>, terminal: bool) {
        let (Some(state), Some(action)) = (self.key.clone(), taken.as_discrete()) else {
            return;
        };
        self.pending = Some(Pending {
            state,
            action,
            reward: reward.first().copied().unwrap_or(0.0),
            next: self.encoder.encode(after.env, after.observation),
            terminal,
        });
    }

    fn delegation_wanted(&self) -> Option<&str> {
        match &self.margin {
            Some((_, to)) if self.wants_delegation => Some(to),
            _ => None,
        }
    }

    fn state(&self) -> Value {
        json!({ "q": self.table.values, "pending": self.pending.as_ref().map(|p| (&p.state, p.action)) })
    }
}

/// Heads for the nearest landmark no other controller has declared,
/// announcing it as its intention.
struct GreedyCover;

impl BuiltinAgent for GreedyCover {
    fn algorithm(&self) -> &'static str {
        "greedy_cover"
    }

    fn act(&mut self, ctx: &AgentContext<'_>, _rng: &mut CounterRng) -> AgentChoice {
        let v = ctx.observation.values();
        let n = (v.len() + 2) / 4;
        let me = (v[0] as i64, v[1] as i64);
        let landmarks: Vec<(i64, i64)> = (0..n).map(|i| (v[2 + 2 * i] as i64, v[3 + 2 * i] as i64)).collect();
        let claimed: Vec<u32> = ctx
            .info
            .get("intentions")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .enumerate()
                    .filter(|(i, _)| *i as u32 != ctx.controller)
                    .filter_map(|(_, t)| t.as_u64().map(|t| t as u32))
                    .collect()
            })
            .unwrap_or_default();
        let dist = |l: (i64, i64)| (l.0 - me.0).abs() + (l.1 - me.1).abs();
        let pick = |free_only: bool| {
            (0..n as u32)
                .filter(|i| !free_only || !claimed.contains(i))
                .min_by_key(|&i| (dist(landmarks[i as usize]), i))
        };
        let target = pick(true).or_else(|| pick(false)).unwrap_or(0);
        let (tx, ty) = landmarks[target as usize];
        let dir = if tx > me.0 {
            1
        } else if tx < me.0 {
            3
        } else if ty > me.1 {
            2
        } else if ty < me.1 {
            0
        } else {
            STAY
        };
        AgentChoice {
            action: Action::discrete(dir),
            intention: Some(target),
        }
    }

    fn state(&self) -> Value {
        Value::Null
    }
}

/// Computes the Pareto front at session start, offers it for ranking, and
/// plays the witness of the preferred entry.
struct ParetoPresenter {
    horizon: u32,
    max_items: u32,
    weights: Vec<f64>,
    front: Option<ParetoFront>,
    /// Environment as it stood when the front was computed; witnesses replay
    /// from here.
    start: Option<Box<dyn Environment>>,
    chosen: Option<usize>,
}

impl ParetoPresenter {
    fn new(horizon: u32, max_items: u32, weights: Vec<f64>) -> Self {
        Self {
            horizon,
            max_items,
            weights,
            front: None,
            start: None,
            chosen: None,
        }
    }

    fn item_id(i: usize) -> String {
        format!("p{i}")
    }

    fn ensure_front(&mut self, env: &dyn Environment) -> Result<&ParetoFront, AgentError> {
        if self.front.is_none() {
            let mut front = enumerate_pareto_front(env, self.horizon)?;
            front.entries.truncate(self.max_items as usize);
            self.front = Some(front);
            self.start = env.try_clone();
        }
        Ok(self.front.as_ref().expect("just set"))
    }

    fn trajectory(env: &dyn Environment, witness: &[u32]) -> Trajectory {
        let mut t = Trajectory::new(env.env_id(), 0);
        let Some(mut e) = env.try_clone() else { return t };
        for &a in witness {
            let key = e.markov_key().map(|k| format!("{k:?}"));
            let Ok(out) = e.step(&[Action::discrete(a)]) else { break };
            t.push(TrajectoryStep {
                observation: out.observations[0].clone(),
                action: Action::discrete(a),
                reward: out.rewards[0].clone(),
                state_key: key,
            });
        }
        t
    }
}

impl BuiltinAgent for ParetoPresenter {
    fn algorithm(&self) -> &'static str {
        "pareto_presenter"
    }

    fn act(&mut self, ctx: &AgentContext<'_>, _rng: &mut CounterRng) -> AgentChoice {
        let weights = self.weights.clone();
        let chosen = self.chosen;
        let a = match self.ensure_front(ctx.env) {
            Ok(front) => {
                let entry = match chosen {
                    Some(i) => front.entries.get(i),
                    None => select_by_utility(front, &weights).ok(),
                };
                entry.and_then(|e| e.witness.get(ctx.step as usize).copied()).unwrap_or(0)
            }
            Err(_) => 0,
        };
        AgentChoice {
            action: Action::discrete(a),
            intention: None,
        }
    }

    fn preference_items(&mut self, env: &dyn Environment, include_frames: bool) -> Result<Vec<TrajectoryDescriptor>, AgentError> {
        let front = self.ensure_front(env)?.clone();
        Ok(front
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut frames = Vec::new();
                if include_frames {
                    if let Some(mut e2) = env.try_clone() {
                        frames.extend(e2.render().ok());
                        for &a in &e.witness {
                            if e2.step(&[Action::discrete(a)]).is_err() {
                                break;
                            }
                            frames.extend(e2.render().ok());
                        }
                    }
                }
                let returns: Vec<String> = e.returns.iter().map(|r| r.to_string()).collect();
                TrajectoryDescriptor {
                    id: Self::item_id(i),
                    label: format!("returns ({})", returns.join(", ")),
                    returns: e.returns.clone(),
                    actions: e.witness.iter().map(|&a| Action::discrete(a)).collect(),
                    frames,
                }
            })
            .collect())
    }

    fn preference_feedback(&mut self, ranking: &[String], fit: Option<(u32, f64)>) {
        let (Some(front), Some(start)) = (self.front.clone(), self.start.as_deref()) else {
            return;
        };
        let index_of = |id: &str| (0..front.entries.len()).find(|&i| Self::item_id(i) == id);
        let Some(top) = ranking.first().and_then(|id| index_of(id)) else {
            return;
        };
        self.chosen = Some(top);
        let Some((steps, lr)) = fit else { return };
        let trajectories: Vec<Trajectory> = front.entries.iter().map(|e| Self::trajectory(start, &e.witness)).collect();
        let features = OneHotFeatures::fit(trajectories.iter());
        let pairs: Vec<_> = pairs_from_ranking(ranking)
            .into_iter()
            .filter_map(|(a, b)| Some((index_of(&a)?, index_of(&b)?)))
            .map(|(a, b)| features.pair(&trajectories[a], &trajectories[b], Preferred::A))
            .collect();
        if pairs.is_empty() {
            return;
        }
        if let Ok(out) = fit_reward_model(&pairs, features.dim(), steps as usize, lr) {
            // Highest learned reward wins; ties keep the better-ranked item.
            let mut best = (top, out.model.reward(&features.feature_sum(&trajectories[top])));
            for id in ranking {
                if let Some(i) = index_of(id) {
                    let r = out.model.reward(&features.feature_sum(&trajectories[i]));
                    if r > best.1 {
                        best = (i, r);
                    }
                }
            }
            self.chosen = Some(best.0);
        }
    }

    fn state(&self) -> Value {
        json!({ "chosen": self.chosen, "front_size": self.front.as_ref().map(|f| f.entries.len()) })
    }
}

struct RandomAgent {
    arity: u32,
}

impl BuiltinAgent for RandomAgent {
    fn algorithm(&self) -> &'static str {
        "random"
    }

    fn act(&mut self, _ctx: &AgentContext<'_>, rng: &mut CounterRng) -> AgentChoice {
        AgentChoice {
            action: Action::discrete(rng.below(u64::from(self.arity)) as u32),
            intention: None,
        }
    }

    fn state(&self) -> Value {
        Value::Null
    }
}
