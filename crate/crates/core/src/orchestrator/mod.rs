//! Session state machine.
//!
//! A [`Session`] is synchronous and clock-free: every entry point takes the
//! current wall time and returns [`Effects`], the events to append and the
//! messages to deliver once they are durable. Nothing is sent before its
//! causing event has a sequence number, and every input is validated in full
//! before any state changes, so a rejected input leaves the session exactly
//! as it was.
//!
//! Event groups start with a head the replayer can dispatch on: a client
//! input (`Join`, `ActSubmit`, ...), `Resume`, `Disconnect`, `AdminEnd`, or a
//! timer head (`BarrierRelease`, a timed `StartEpisode`, a timeout
//! `SessionEnd`).

mod driver;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::builtin::{build_agent, AgentContext, BuiltinAgent, Shaping};
use crate::agents::{pairs_from_ranking, Annotation};
use crate::config::{verify_join_token, ExperimentDef};
use crate::env::{make_env, Action, EnvCapabilities, Environment, Observation};
use crate::hash::{digest_value, hex64};
use crate::protocol::{
    validate_transition, ActRequest, ActionSource, ControllerId, ControllerKind, DelegationGrant, DelegationRequest,
    DelegationRevoke, EpisodeEnd, Envelope, ErrorPayload, JoinAck, ObserveBroadcast, Payload, Phase, PrefQuery,
    ProtocolState, RoleAssign, Sender, SessionEnd, Snapshot, StartEpisode, StepBroadcast, TakenAction, Widget,
};
use crate::rng::{split_seed, CounterRng};
use crate::store::{Event, EventKind};

pub use driver::SessionDriver;

/// Reset seed of `episode`: episode 0 reuses the creation reset.
pub fn episode_seed(master_seed: u64, episode: u32) -> u64 {
    let env_seed = split_seed(master_seed, "env");
    if episode == 0 {
        env_seed
    } else {
        split_seed(env_seed, &format!("episode:{episode}"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("role `{0}` is already taken")]
    RoleTaken(String),
    #[error("unknown or invalid join token")]
    UnknownToken,
    #[error("no vacant human role")]
    SessionFull,
    #[error("no such role: {0}")]
    NoSuchRole(String),
    #[error("stale tick: current is {current}, got {got:?}")]
    StaleTick { current: u64, got: Option<u64> },
    #[error("not your turn: {0}")]
    NotYourTurn(String),
    #[error("action violates the space: {0}")]
    SpaceViolation(String),
    #[error("role `{role}` already acted at tick {tick}")]
    Duplicate { role: String, tick: u64 },
    #[error("delegation target `{0}` is not bound")]
    TargetUnbound(String),
    #[error("channel violation: {0}")]
    ChannelViolation(String),
    #[error("ranking is not a permutation of the query items: {0}")]
    InvalidRanking(String),
    #[error("unknown preference query `{0}`")]
    UnknownQuery(String),
    #[error("not permitted: {0}")]
    NotPermitted(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("the session has ended")]
    Ended,
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Config(_) => "ConfigError",
            SessionError::RoleTaken(_) => "RoleTaken",
            SessionError::UnknownToken => "UnknownToken",
            SessionError::SessionFull => "SessionFull",
            SessionError::NoSuchRole(_) => "NoSuchRole",
            SessionError::StaleTick { .. } => "StaleTick",
            SessionError::NotYourTurn(_) => "NotYourTurn",
            SessionError::SpaceViolation(_) => "SpaceViolation",
            SessionError::Duplicate { .. } => "Duplicate",
            SessionError::TargetUnbound(_) => "TargetUnbound",
            SessionError::ChannelViolation(_) => "ChannelViolation",
            SessionError::InvalidRanking(_) => "InvalidRanking",
            SessionError::UnknownQuery(_) => "UnknownQuery",
            SessionError::NotPermitted(_) => "NotPermitted",
            SessionError::Protocol(_) => "ProtocolViolation",
            SessionError::Ended => "SessionEnded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// The connection that sent the input being handled.
    Caller,
    /// Connected human roles; disconnected ones get the message queued.
    Roles(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub target: Target,
    pub envelope: Envelope,
    /// Seq of the logged event this message follows from. Only the storage
    /// failure notice has none.
    pub cause: Option<u64>,
}

#[derive(Debug, Default)]
pub struct Effects {
    pub events: Vec<Event>,
    pub deliveries: Vec<Delivery>,
    pub rejected: Option<SessionError>,
}

#[derive(Debug, Clone)]
pub struct SessionParams {
    pub session_id: String,
    /// Materialized definition (condition overlay already applied).
    pub def: ExperimentDef,
    pub condition: Option<String>,
    pub master_seed: u64,
    /// Replays run without the completion secret and skip token checks.
    pub verify_tokens: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    Vacant,
    Human {
        #[serde(skip)]
        token: String,
        connected: bool,
    },
    Agent {
        algorithm: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseCause {
    Complete,
    Deadline,
    Paced,
}

#[derive(Debug, Clone)]
struct Barrier {
    tick: u64,
    required: BTreeSet<String>,
    received: BTreeMap<String, (Action, Option<u32>)>,
    deadline: u64,
    paced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelegationState {
    pub role: String,
    /// Role whose binding supplies actions by default (the role itself).
    pub default_controller: String,
    pub current_controller: String,
    pub since_tick: u64,
}

#[derive(Debug, Clone)]
struct OpenRequest {
    target: String,
    requester: String,
}

#[derive(Debug, Clone)]
struct OpenQuery {
    id: String,
    target: String,
    items: Vec<String>,
    envelope: Envelope,
}

struct AgentSlot {
    agent: Box<dyn BuiltinAgent>,
    rng: CounterRng,
    controls: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub study_id: String,
    pub condition: Option<String>,
    pub phase: Phase,
    pub tick: u64,
    pub episode: u32,
    pub episodes: u32,
    pub bindings: BTreeMap<String, Binding>,
    pub delegation: Vec<DelegationState>,
    pub ended: bool,
}

pub struct Session {
    id: String,
    def: ExperimentDef,
    condition: Option<String>,
    caps: EnvCapabilities,
    env: Box<dyn Environment>,
    master_seed: u64,
    verify_tokens: bool,
    created_at: u64,
    proto: ProtocolState,
    next_seq: u64,
    tick: u64,
    episode: u32,
    in_episode: bool,
    step_in_episode: u32,
    returns: Vec<Vec<f64>>,
    observations: Vec<Observation>,
    info: BTreeMap<String, Value>,
    bindings: BTreeMap<String, Binding>,
    tokens: BTreeMap<String, String>,
    agents: BTreeMap<String, AgentSlot>,
    delegation: BTreeMap<String, DelegationState>,
    /// Controller changes that take effect when the next barrier opens;
    /// `None` restores the default.
    pending_delegation: BTreeMap<String, Option<String>>,
    open_requests: BTreeMap<String, OpenRequest>,
    barrier: Option<Barrier>,
    last_act_request: Option<Envelope>,
    next_episode_at: Option<u64>,
    annotations: Vec<Annotation>,
    last_broadcast_at: Option<u64>,
    query: Option<OpenQuery>,
    undelivered: BTreeMap<String, Vec<Envelope>>,
    ended: bool,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("JSON-representable")
}

impl Session {
    /// Builds the environment and agents, resets the environment with the
    /// `"env"` seed and logs `SessionCreated`.
    pub fn create(params: SessionParams, now: u64) -> Result<(Self, Effects), SessionError> {
        let SessionParams {
            session_id,
            def,
            condition,
            master_seed,
            verify_tokens,
        } = params;
        def.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        if def.human_roles().next().is_none() {
            return Err(SessionError::Config("at least one human role is required".into()));
        }
        let mut env = make_env(&def.env).map_err(|e| SessionError::Config(e.to_string()))?;
        let caps = env.capabilities().clone();
        let observations = env
            .reset(episode_seed(master_seed, 0))
            .map_err(|e| SessionError::Config(e.to_string()))?;
        let mut agents = BTreeMap::new();
        let mut bindings = BTreeMap::new();
        let mut delegation = BTreeMap::new();
        for role in &def.roles {
            let binding = match role.controller_kind {
                ControllerKind::Human => Binding::Vacant,
                ControllerKind::Agent => {
                    let agent = build_agent(&def, role, &caps).map_err(|e| SessionError::Config(e.to_string()))?;
                    let algorithm = agent.algorithm().to_string();
                    agents.insert(
                        role.name.clone(),
                        AgentSlot {
                            agent,
                            rng: CounterRng::new(split_seed(master_seed, &format!("agent:{}", role.name))),
                            controls: role.controls,
                        },
                    );
                    Binding::Agent { algorithm }
                }
            };
            bindings.insert(role.name.clone(), binding);
            if role.controls.is_some() {
                delegation.insert(
                    role.name.clone(),
                    DelegationState {
                        role: role.name.clone(),
                        default_controller: role.name.clone(),
                        current_controller: role.name.clone(),
                        since_tick: 0,
                    },
                );
            }
        }
        let dims = caps.reward_dims as usize;
        let n = caps.num_controllers as usize;
        let mut session = Self {
            id: session_id,
            condition,
            caps,
            env,
            master_seed,
            verify_tokens,
            created_at: now,
            proto: ProtocolState::lobby(),
            next_seq: 0,
            tick: 0,
            episode: 0,
            in_episode: false,
            step_in_episode: 0,
            returns: vec![vec![0.0; dims]; n],
            observations,
            info: BTreeMap::new(),
            bindings,
            tokens: BTreeMap::new(),
            agents,
            delegation,
            pending_delegation: BTreeMap::new(),
            open_requests: BTreeMap::new(),
            barrier: None,
            last_act_request: None,
            next_episode_at: None,
            annotations: Vec::new(),
            last_broadcast_at: None,
            query: None,
            undelivered: BTreeMap::new(),
            ended: false,
            def,
        };
        let mut fx = Effects::default();
        let redacted = session.def.redacted();
        let payload = json!({
            "session_id": session.id,
            "study_id": session.def.study_id,
            "condition": session.condition,
            "master_seed": master_seed,
            "experiment_hash": redacted.experiment_hash(),
            "experiment": redacted.to_value(),
        });
        session.push(&mut fx, now, EventKind::SessionCreated, payload);
        Ok((session, fx))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn def(&self) -> &ExperimentDef {
        &self.def
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn episode(&self) -> u32 {
        self.episode
    }

    pub fn phase(&self) -> Phase {
        self.proto.phase
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn binding(&self, role: &str) -> Option<&Binding> {
        self.bindings.get(role)
    }

    /// Role whose binding currently supplies actions for `role`.
    pub fn controller_of(&self, role: &str) -> Option<&str> {
        self.delegation.get(role).map(|d| d.current_controller.as_str())
    }

    /// Roles owing an action in the open barrier.
    pub fn required_roles(&self) -> Vec<String> {
        self.barrier
            .as_ref()
            .map(|b| b.required.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn status(&self) -> SessionStatus {
        SessionStatus {
            session_id: self.id.clone(),
            study_id: self.def.study_id.clone(),
            condition: self.condition.clone(),
            phase: self.proto.phase,
            tick: self.tick,
            episode: self.episode,
            episodes: self.def.episodes,
            bindings: self.bindings.clone(),
            delegation: self.delegation.values().cloned().collect(),
            ended: self.ended,
        }
    }

    /// Earliest wall time at which [`Session::on_timer`] has work.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.ended {
            return None;
        }
        let mut t = self.created_at.saturating_add(self.def.max_session_ms);
        if let Some(at) = self.next_episode_at {
            t = t.min(at);
        }
        if let Some(b) = &self.barrier {
            t = t.min(b.deadline);
        }
        Some(t)
    }

    /// Digest over environment state, learner state, RNG cursors, tick and
    /// episode.
    pub fn state_digest(&self) -> u64 {
        let agents: BTreeMap<&String, Value> = self.agents.iter().map(|(r, s)| (r, s.agent.state())).collect();
        let rng: BTreeMap<&String, u64> = self.agents.iter().map(|(r, s)| (r, s.rng.cursor())).collect();
        digest_value(&json!({
            "tick": self.tick,
            "episode": self.episode,
            "env": self.env.snapshot(),
            "agents": agents,
            "rng": rng,
        }))
    }

    // -- event and message plumbing ----------------------------------------

    fn push(&mut self, fx: &mut Effects, now: u64, kind: EventKind, payload: Value) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        fx.events.push(Event {
            seq,
            wall_time_ms: now,
            tick: self.in_episode.then_some(self.tick),
            kind,
            payload,
        });
        seq
    }

    fn send(&mut self, fx: &mut Effects, now: u64, sender: Sender, payload: Payload, target: Target) -> u64 {
        let tick = payload.kind().carries_tick().then_some(self.tick);
        let envelope = Envelope::new(&self.id, sender, tick, payload, now);
        self.proto = validate_transition(&self.proto, &envelope)
            .unwrap_or_else(|e| panic!("session emitted an out-of-phase {}: {e}", envelope.kind()));
        let seq = self.push(fx, now, EventKind::Message(envelope.kind()), to_value(&envelope));
        self.deliver(fx, target, envelope, seq);
        seq
    }

    fn deliver(&mut self, fx: &mut Effects, target: Target, envelope: Envelope, cause: u64) {
        let roles = match target {
            Target::Caller => {
                fx.deliveries.push(Delivery {
                    target: Target::Caller,
                    envelope,
                    cause: Some(cause),
                });
                return;
            }
            Target::Roles(roles) => roles,
        };
        let mut live = Vec::new();
        for role in roles {
            match self.bindings.get(&role) {
                Some(Binding::Human { connected: true, .. }) => live.push(role),
                Some(Binding::Human { connected: false, .. }) => {
                    self.undelivered.entry(role).or_default().push(envelope.clone())
                }
                _ => {}
            }
        }
        if !live.is_empty() {
            fx.deliveries.push(Delivery {
                target: Target::Roles(live),
                envelope,
                cause: Some(cause),
            });
        }
    }

    fn all_humans(&self) -> Target {
        Target::Roles(
            self.bindings
                .iter()
                .filter(|(_, b)| matches!(b, Binding::Human { .. }))
                .map(|(r, _)| r.clone())
                .collect(),
        )
    }

    fn server() -> Sender {
        Sender::Server
    }

    fn agent_sender(role: &str) -> Sender {
        Sender::Controller(ControllerId::agent(role))
    }

    fn is_human_bound(&self, role: &str) -> bool {
        matches!(self.bindings.get(role), Some(Binding::Human { .. }))
    }

    fn is_agent(&self, role: &str) -> bool {
        matches!(self.bindings.get(role), Some(Binding::Agent { .. }))
    }

    /// First tick at which a delegation change made now takes effect.
    fn effective_tick(&self) -> u64 {
        if self.barrier.is_some() {
            self.tick + 1
        } else {
            self.tick
        }
    }

    // -- inputs --------------------------------------------------------------

    /// Handles one client envelope. Rejections are logged as
    /// `InputRejected` and answered with an `Error` to the caller.
    pub fn handle_input(&mut self, envelope: Envelope, now: u64) -> Effects {
        let mut fx = Effects::default();
        if self.ended {
            fx.rejected = Some(SessionError::Ended);
            return fx;
        }
        if let Payload::Heartbeat(_) = envelope.payload {
            return fx;
        }
        if let Err(e) = self.dispatch_input(&envelope, now, &mut fx) {
            debug_assert!(fx.events.is_empty(), "rejected input must not have produced events");
            let payload = json!({
                "envelope": to_value(&envelope),
                "code": e.code(),
                "message": e.to_string(),
            });
            let seq = self.push(&mut fx, now, EventKind::InputRejected, payload);
            let err = Envelope::new(
                &self.id,
                Self::server(),
                None,
                Payload::Error(ErrorPayload {
                    code: e.code().into(),
                    message: e.to_string(),
                }),
                now,
            );
            self.deliver(&mut fx, Target::Caller, err, seq);
            fx.rejected = Some(e);
        }
        fx
    }

    /// Consumes the sequence number of a logged rejection during replay.
    pub(crate) fn absorb_rejection(&mut self) {
        self.next_seq += 1;
    }

    fn dispatch_input(&mut self, envelope: &Envelope, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        envelope.validate().map_err(SessionError::Protocol)?;
        if envelope.session_id != self.id {
            return Err(SessionError::Protocol(format!("envelope is for session `{}`", envelope.session_id)));
        }
        let sender = match &envelope.sender {
            Sender::Controller(c) if c.controller_kind == ControllerKind::Human => c.role_name.clone(),
            _ => return Err(SessionError::Protocol("inputs must come from a human controller".into())),
        };
        if let Payload::Join(_) = envelope.payload {
            return self.on_join(envelope, now, fx);
        }
        if !self.is_human_bound(&sender) {
            return Err(SessionError::NotPermitted(format!("`{sender}` is not a joined human role")));
        }
        match &envelope.payload {
            Payload::ActSubmit(_) => self.on_act_submit(envelope, &sender, now, fx),
            Payload::RewardAnnotation(a) => self.on_annotation(envelope, &sender, a.value, now, fx),
            Payload::ChannelMsg(_) => self.on_channel(envelope, &sender, now, fx),
            Payload::DelegationRequest(p) => self.on_delegation_request(envelope, &sender, p, now, fx),
            Payload::DelegationGrant(p) => self.on_delegation_grant(envelope, &sender, p, now, fx),
            Payload::DelegationRevoke(p) => self.on_delegation_revoke(envelope, &sender, p, now, fx),
            Payload::PrefResponse(_) => self.on_pref_response(envelope, &sender, now, fx),
            other => Err(SessionError::Protocol(format!("{} is sent by the server only", other.kind()))),
        }
    }

    fn check_protocol(&self, envelope: &Envelope) -> Result<ProtocolState, SessionError> {
        validate_transition(&self.proto, envelope).map_err(|e| SessionError::Protocol(e.to_string()))
    }

    fn check_tick_not_ahead(&self, envelope: &Envelope) -> Result<(), SessionError> {
        match envelope.tick {
            Some(t) if t > self.tick => Err(SessionError::StaleTick {
                current: self.tick,
                got: Some(t),
            }),
            _ => Ok(()),
        }
    }

    fn log_input(&mut self, fx: &mut Effects, envelope: &Envelope, now: u64) -> u64 {
        self.push(fx, now, EventKind::Message(envelope.kind()), to_value(envelope))
    }

    fn on_join(&mut self, envelope: &Envelope, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        let Payload::Join(join) = &envelope.payload else { unreachable!() };
        if let Some(role) = self.tokens.get(&join.token).cloned() {
            return self.on_resume(envelope, &role, now, fx);
        }
        if self.verify_tokens && !verify_join_token(&self.def.recruitment.completion_secret, &self.id, &join.token) {
            return Err(SessionError::UnknownToken);
        }
        let vacant: Vec<String> = self
            .bindings
            .iter()
            .filter(|(_, b)| **b == Binding::Vacant)
            .map(|(r, _)| r.clone())
            .collect();
        let role = match &join.role {
            Some(r) => match self.def.role(r) {
                Some(def) if def.controller_kind == ControllerKind::Human => {
                    if !vacant.contains(r) {
                        return Err(SessionError::RoleTaken(r.clone()));
                    }
                    r.clone()
                }
                _ => return Err(SessionError::NoSuchRole(r.clone())),
            },
            None => vacant.first().cloned().ok_or(SessionError::SessionFull)?,
        };
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        self.log_input(fx, envelope, now);
        self.bindings.insert(
            role.clone(),
            Binding::Human {
                token: join.token.clone(),
                connected: true,
            },
        );
        self.tokens.insert(join.token.clone(), role.clone());
        let ack = Payload::JoinAck(JoinAck {
            role: role.clone(),
            resumed: false,
            snapshot: None,
        });
        self.send(fx, now, Self::server(), ack, Target::Caller);
        let assign = Payload::RoleAssign(self.role_assign(&role));
        self.send(fx, now, Self::server(), assign, Target::Caller);
        if vacant.len() == 1 {
            self.begin(now, fx);
        }
        Ok(())
    }

    fn role_assign(&self, role: &str) -> RoleAssign {
        let def = self.def.role(role).expect("bound roles are declared");
        let channels = self
            .def
            .channels
            .iter()
            .filter(|c| c.senders.iter().chain(&c.receivers).any(|r| r == role))
            .map(|c| c.name.clone())
            .collect();
        RoleAssign {
            role: role.into(),
            controller: ControllerId::human(role),
            widgets: self.def.widgets(role),
            controls: def.controls,
            action_space: def.controls.map(|c| self.caps.action_spaces[c as usize].clone()),
            channels,
        }
    }

    fn on_resume(&mut self, envelope: &Envelope, role: &str, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        self.push(fx, now, EventKind::Resume, to_value(envelope));
        if let Some(Binding::Human { connected, .. }) = self.bindings.get_mut(role) {
            *connected = true;
        }
        let mut restore = vec![Envelope::new(
            &self.id,
            Self::server(),
            None,
            Payload::RoleAssign(self.role_assign(role)),
            now,
        )];
        if let Some(q) = self.query.as_ref().filter(|q| q.target == role) {
            restore.push(q.envelope.clone());
        }
        let queued = self.undelivered.remove(role).unwrap_or_default();
        if let (Some(req), Some(b)) = (&self.last_act_request, &self.barrier) {
            if !b.paced && b.required.contains(role) && !queued.contains(req) {
                restore.push(req.clone());
            }
        }
        restore.extend(queued);
        let controls = self.def.role(role).and_then(|r| r.controls);
        let snapshot = Snapshot {
            tick: self.tick,
            phase: self.proto.phase,
            episode: self.episode,
            observation: controls.and_then(|c| self.observations.get(c as usize).cloned()),
            frame: self.env.render().ok(),
            undelivered: restore,
        };
        let ack = Payload::JoinAck(JoinAck {
            role: role.into(),
            resumed: true,
            snapshot: Some(Box::new(snapshot)),
        });
        self.send(fx, now, Self::server(), ack, Target::Caller);
        Ok(())
    }

    /// Marks a human binding disconnected; its timeouts substitute defaults
    /// and its messages queue until it resumes.
    pub fn disconnect(&mut self, role: &str, now: u64) -> Effects {
        let mut fx = Effects::default();
        if self.ended {
            return fx;
        }
        if let Some(Binding::Human { connected: true, .. }) = self.bindings.get(role) {
            self.push(&mut fx, now, EventKind::Disconnect, json!({ "role": role }));
            if let Some(Binding::Human { connected, .. }) = self.bindings.get_mut(role) {
                *connected = false;
            }
        }
        fx
    }

    fn on_act_submit(&mut self, envelope: &Envelope, sender: &str, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        let Payload::ActSubmit(p) = &envelope.payload else { unreachable!() };
        let role = envelope.acting_role().unwrap_or(sender).to_string();
        let role_def = self.def.role(&role).ok_or_else(|| SessionError::NoSuchRole(role.clone()))?;
        let barrier = match &self.barrier {
            Some(b) if envelope.tick == Some(b.tick) => b,
            _ => {
                return Err(SessionError::StaleTick {
                    current: self.tick,
                    got: envelope.tick,
                })
            }
        };
        if !barrier.required.contains(&role) {
            return Err(SessionError::NotYourTurn(format!("`{role}` owes no action at tick {}", barrier.tick)));
        }
        if self.controller_of(&role) != Some(sender) {
            return Err(SessionError::NotYourTurn(format!("`{sender}` does not control `{role}`")));
        }
        if barrier.received.contains_key(&role) {
            return Err(SessionError::Duplicate {
                role,
                tick: barrier.tick,
            });
        }
        let controls = role_def.controls.expect("required roles control the environment") as usize;
        self.caps.action_spaces[controls]
            .check(&p.action)
            .map_err(SessionError::SpaceViolation)?;
        if p.intention.is_some() && !self.caps.intentions {
            return Err(SessionError::SpaceViolation("this environment takes no intentions".into()));
        }
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        self.log_input(fx, envelope, now);
        let barrier = self.barrier.as_mut().expect("checked above");
        barrier.received.insert(role, (p.action.clone(), p.intention));
        if barrier.received.len() == barrier.required.len() {
            self.release(now, ReleaseCause::Complete, fx);
        }
        Ok(())
    }

    fn on_annotation(&mut self, envelope: &Envelope, sender: &str, value: i8, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        if !self.def.annotation.enabled {
            return Err(SessionError::NotPermitted("annotation is disabled".into()));
        }
        if !self.def.widgets(sender).contains(&Widget::RewardButtons) {
            return Err(SessionError::NotPermitted(format!("`{sender}` has no reward buttons")));
        }
        let Some(at) = self.last_broadcast_at else {
            return Err(SessionError::NotPermitted("no step to annotate yet".into()));
        };
        self.check_tick_not_ahead(envelope)?;
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        self.log_input(fx, envelope, now);
        self.annotations.push(Annotation {
            value,
            latency_ms: now.saturating_sub(at),
        });
        Ok(())
    }

    fn on_channel(&mut self, envelope: &Envelope, sender: &str, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        let Payload::ChannelMsg(msg) = &envelope.payload else { unreachable!() };
        let channel = self
            .def
            .channel(&msg.channel)
            .ok_or_else(|| SessionError::ChannelViolation(format!("unknown channel `{}`", msg.channel)))?;
        if !channel.senders.iter().any(|s| s == sender) {
            return Err(SessionError::ChannelViolation(format!("`{sender}` may not send on `{}`", channel.name)));
        }
        let len = msg.content.chars().count();
        if len > channel.max_len as usize {
            return Err(SessionError::ChannelViolation(format!("{len} characters exceed the cap of {}", channel.max_len)));
        }
        if let Some(alphabet) = &channel.alphabet {
            if !alphabet.contains(&msg.content) {
                return Err(SessionError::ChannelViolation(format!("`{}` is not a symbol of `{}`", msg.content, channel.name)));
            }
        }
        self.check_tick_not_ahead(envelope)?;
        let receivers = channel.receivers.clone();
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        let seq = self.log_input(fx, envelope, now);
        self.deliver(fx, Target::Roles(receivers), envelope.clone(), seq);
        Ok(())
    }

    fn delegable(&self, role: &str) -> Result<String, SessionError> {
        self.controller_of(role)
            .map(str::to_string)
            .ok_or_else(|| SessionError::NoSuchRole(format!("`{role}` does not control the environment")))
    }

    fn check_target(&self, target: &str) -> Result<(), SessionError> {
        match self.bindings.get(target) {
            None => Err(SessionError::NoSuchRole(target.into())),
            Some(Binding::Vacant) => Err(SessionError::TargetUnbound(target.into())),
            Some(_) => Ok(()),
        }
    }

    fn on_delegation_request(
        &mut self,
        envelope: &Envelope,
        sender: &str,
        p: &DelegationRequest,
        now: u64,
        fx: &mut Effects,
    ) -> Result<(), SessionError> {
        let current = self.delegable(&p.role)?;
        self.check_target(&p.target_role)?;
        if p.target_role == current {
            return Err(SessionError::NotPermitted(format!("`{}` already controls `{}`", current, p.role)));
        }
        if p.target_role == p.role {
            return Err(SessionError::NotPermitted("use DelegationRevoke to restore the default".into()));
        }
        if sender != current && sender != p.target_role {
            return Err(SessionError::NotPermitted(format!("`{sender}` is neither side of this handover")));
        }
        if self.open_requests.contains_key(&p.role) || self.pending_delegation.contains_key(&p.role) {
            return Err(SessionError::NotPermitted(format!("a handover of `{}` is already under way", p.role)));
        }
        self.check_tick_not_ahead(envelope)?;
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        let seq = self.log_input(fx, envelope, now);
        let counterpart = if sender == current { p.target_role.clone() } else { current };
        if self.is_agent(&counterpart) {
            self.grant(fx, now, &p.role, &p.target_role, Self::agent_sender(&counterpart));
        } else {
            self.open_requests.insert(
                p.role.clone(),
                OpenRequest {
                    target: p.target_role.clone(),
                    requester: sender.into(),
                },
            );
            let all = self.all_humans();
            self.deliver(fx, all, envelope.clone(), seq);
        }
        Ok(())
    }

    fn grant(&mut self, fx: &mut Effects, now: u64, role: &str, target: &str, sender: Sender) {
        self.open_requests.remove(role);
        self.pending_delegation.insert(role.into(), Some(target.into()));
        let payload = Payload::DelegationGrant(DelegationGrant {
            role: role.into(),
            target_role: target.into(),
            effective_tick: Some(self.effective_tick()),
        });
        let all = self.all_humans();
        self.send(fx, now, sender, payload, all);
    }

    fn on_delegation_grant(
        &mut self,
        envelope: &Envelope,
        sender: &str,
        p: &DelegationGrant,
        now: u64,
        fx: &mut Effects,
    ) -> Result<(), SessionError> {
        let current = self.delegable(&p.role)?;
        self.check_target(&p.target_role)?;
        if p.target_role == current || p.target_role == p.role {
            return Err(SessionError::NotPermitted(format!("`{}` already controls `{}`", p.target_role, p.role)));
        }
        let answers_request = self.open_requests.get(&p.role).is_some_and(|r| {
            let counterpart = if r.requester == current { &r.target } else { &current };
            r.target == p.target_role && counterpart == sender
        });
        if !answers_request && sender != current {
            return Err(SessionError::NotPermitted(format!("`{sender}` cannot hand over `{}`", p.role)));
        }
        self.check_tick_not_ahead(envelope)?;
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        let seq = self.log_input(fx, envelope, now);
        self.open_requests.remove(&p.role);
        self.pending_delegation.insert(p.role.clone(), Some(p.target_role.clone()));
        let mut echo = envelope.clone();
        echo.payload = Payload::DelegationGrant(DelegationGrant {
            effective_tick: Some(self.effective_tick()),
            ..p.clone()
        });
        let all = self.all_humans();
        self.deliver(fx, all, echo, seq);
        Ok(())
    }

    fn on_delegation_revoke(
        &mut self,
        envelope: &Envelope,
        sender: &str,
        p: &DelegationRevoke,
        now: u64,
        fx: &mut Effects,
    ) -> Result<(), SessionError> {
        let current = self.delegable(&p.role)?;
        let delegated = current != p.role || self.pending_delegation.get(&p.role).is_some_and(Option::is_some);
        if !delegated {
            return Err(SessionError::NotPermitted(format!("`{}` is not delegated", p.role)));
        }
        if sender != current && sender != p.role {
            return Err(SessionError::NotPermitted(format!("`{sender}` cannot revoke `{}`", p.role)));
        }
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        let seq = self.log_input(fx, envelope, now);
        self.open_requests.remove(&p.role);
        self.pending_delegation.insert(p.role.clone(), None);
        let mut echo = envelope.clone();
        echo.payload = Payload::DelegationRevoke(DelegationRevoke {
            role: p.role.clone(),
            effective_tick: Some(self.effective_tick()),
        });
        let all = self.all_humans();
        self.deliver(fx, all, echo, seq);
        Ok(())
    }

    fn on_pref_response(&mut self, envelope: &Envelope, sender: &str, now: u64, fx: &mut Effects) -> Result<(), SessionError> {
        let Payload::PrefResponse(p) = &envelope.payload else { unreachable!() };
        let query = match &self.query {
            Some(q) if q.id == p.query_id => q,
            _ => return Err(SessionError::UnknownQuery(p.query_id.clone())),
        };
        if query.target != sender {
            return Err(SessionError::NotPermitted(format!("query `{}` is addressed to `{}`", q_id(query), query.target)));
        }
        let mut want = query.items.clone();
        let mut got = p.ranking.clone();
        want.sort();
        got.sort();
        if want != got {
            return Err(SessionError::InvalidRanking(format!("{:?}", p.ranking)));
        }
        let next = self.check_protocol(envelope)?;

        self.proto = next;
        self.log_input(fx, envelope, now);
        self.query = None;
        let pairs = pairs_from_ranking(&p.ranking);
        let fit = self
            .def
            .preferences
            .fit_reward_model
            .then_some((self.def.preferences.fit_steps, self.def.preferences.learning_rate));
        let mut presenters = Vec::new();
        for (role, slot) in &mut self.agents {
            if slot.agent.algorithm() == "pareto_presenter" {
                slot.agent.preference_feedback(&p.ranking, fit);
                presenters.push(role.clone());
            }
        }
        let payload = json!({
            "roles": presenters,
            "preference_pairs": pairs,
            "fit": fit.is_some(),
        });
        self.push(fx, now, EventKind::LearnerUpdate, payload);
        Ok(())
    }

    // -- lifecycle -----------------------------------------------------------

    /// All human roles are bound: open the preference query, if any, and
    /// start the first episode.
    fn begin(&mut self, now: u64, fx: &mut Effects) {
        if self.def.preferences.enabled {
            self.issue_pref_query(now, fx);
        }
        self.start_episode(now, fx);
    }

    fn issue_pref_query(&mut self, now: u64, fx: &mut Effects) {
        let Some(target) = self
            .def
            .human_roles()
            .map(|r| r.name.clone())
            .filter(|r| self.def.widgets(r).contains(&Widget::RankingView))
            .min()
        else {
            return;
        };
        let include_frames = self.def.preferences.include_frames;
        let Some(slot) = self.agents.values_mut().find(|s| s.agent.algorithm() == "pareto_presenter") else {
            return;
        };
        let items = match slot.agent.preference_items(&*self.env, include_frames) {
            Ok(items) if items.len() >= 2 => items,
            Ok(_) => return,
            Err(e) => {
                tracing::warn!(error = %e, "cannot build preference items");
                return;
            }
        };
        let id = "q0".to_string();
        let ids = items.iter().map(|i| i.id.clone()).collect();
        let payload = Payload::PrefQuery(PrefQuery {
            query_id: id.clone(),
            target_role: target.clone(),
            items,
        });
        let envelope = Envelope::new(&self.id, Self::server(), None, payload.clone(), now);
        self.send(fx, now, Self::server(), payload, Target::Roles(vec![target.clone()]));
        self.query = Some(OpenQuery {
            id,
            target,
            items: ids,
            envelope,
        });
    }

    fn start_episode(&mut self, now: u64, fx: &mut Effects) {
        let episode = self.episode;
        let all = self.all_humans();
        self.send(fx, now, Self::server(), Payload::StartEpisode(StartEpisode { episode }), all.clone());
        if episode > 0 {
            self.commit_learners(now, fx);
            match self.env.reset(episode_seed(self.master_seed, episode)) {
                Ok(obs) => self.observations = obs,
                Err(e) => return self.fail_env(now, fx, &e.to_string()),
            }
        }
        self.info.clear();
        self.in_episode = true;
        self.step_in_episode = 0;
        let dims = self.caps.reward_dims as usize;
        self.returns = vec![vec![0.0; dims]; self.caps.num_controllers as usize];
        let frame = match self.env.render() {
            Ok(f) => f,
            Err(e) => return self.fail_env(now, fx, &e.to_string()),
        };
        let payload = Payload::ObserveBroadcast(ObserveBroadcast {
            observations: self.observations.clone(),
            frame,
        });
        self.send(fx, now, Self::server(), payload, all);
        self.open_barrier(now, fx);
    }

    fn open_barrier(&mut self, now: u64, fx: &mut Effects) {
        for (role, change) in std::mem::take(&mut self.pending_delegation) {
            if let Some(d) = self.delegation.get_mut(&role) {
                d.current_controller = change.unwrap_or_else(|| d.default_controller.clone());
                d.since_tick = self.tick;
            }
        }
        let required: BTreeSet<String> = self
            .delegation
            .values()
            .filter(|d| self.is_human_bound(&d.current_controller))
            .map(|d| d.role.clone())
            .collect();
        let tick = self.tick;
        if required.is_empty() {
            self.barrier = Some(Barrier {
                tick,
                required,
                received: BTreeMap::new(),
                deadline: now + self.def.tick_interval_ms,
                paced: true,
            });
            self.last_act_request = None;
            return;
        }
        let wait = required
            .iter()
            .filter_map(|r| self.def.role(r))
            .map(|r| r.action_deadline_ms)
            .max()
            .unwrap_or(crate::config::DEFAULT_DEADLINE_MS);
        let deadline = now + wait;
        let roles: Vec<String> = required.iter().cloned().collect();
        self.barrier = Some(Barrier {
            tick,
            required,
            received: BTreeMap::new(),
            deadline,
            paced: false,
        });
        let payload = Payload::ActRequest(ActRequest {
            tick,
            roles,
            deadline_ms: deadline,
        });
        self.last_act_request = Some(Envelope::new(&self.id, Self::server(), None, payload.clone(), now));
        let all = self.all_humans();
        self.send(fx, now, Self::server(), payload, all);
    }

    /// Applies each learner's deferred update with the annotations received
    /// since the last broadcast.
    fn commit_learners(&mut self, now: u64, fx: &mut Effects) {
        let annotations = std::mem::take(&mut self.annotations);
        let target = self.annotation_target();
        let shaping = Shaping {
            beta: self.def.annotation.beta,
            window_ms: self.def.annotation.window_ms,
        };
        let mut updates = Vec::new();
        for (role, slot) in &mut self.agents {
            let shaped = target.as_deref() == Some(role.as_str());
            let update = if shaped {
                slot.agent.commit(&annotations, Some(shaping))
            } else {
                slot.agent.commit(&[], None)
            };
            if let Some(u) = update {
                updates.push(json!({ "role": role, "update": u }));
            }
        }
        for u in updates {
            self.push(fx, now, EventKind::LearnerUpdate, u);
        }
    }

    fn annotation_target(&self) -> Option<String> {
        if !self.def.annotation.enabled {
            return None;
        }
        match &self.def.annotation.target {
            Some(t) => Some(t.clone()),
            None => self
                .agents
                .iter()
                .find(|(_, s)| crate::agents::builtin::accepts_annotations(s.agent.algorithm()))
                .map(|(r, _)| r.clone()),
        }
    }

    /// Advances one tick: substitutes defaults for missing humans, polls
    /// agents, steps the environment once and broadcasts the outcome.
    fn release(&mut self, now: u64, cause: ReleaseCause, fx: &mut Effects) {
        let barrier = self.barrier.take().expect("release needs an open barrier");
        self.last_act_request = None;
        let received: Vec<&String> = barrier.received.keys().collect();
        self.push(
            fx,
            now,
            EventKind::BarrierRelease,
            json!({ "tick": barrier.tick, "cause": cause, "received": received }),
        );

        let n = self.caps.num_controllers as usize;
        let mut joint: Vec<Option<Action>> = vec![None; n];
        let mut intentions: Vec<Option<u32>> = vec![None; n];
        let mut taken = Vec::new();
        let mut agent_driven = Vec::new();
        let acting: Vec<(String, u32, String)> = self
            .delegation
            .values()
            .map(|d| {
                let c = self.def.role(&d.role).and_then(|r| r.controls).expect("delegation covers controlling roles");
                (d.role.clone(), c, d.current_controller.clone())
            })
            .collect();
        for (role, c, controller) in &acting {
            if self.is_agent(controller) {
                agent_driven.push((role.clone(), *c, controller.clone()));
                continue;
            }
            let (action, intention, source) = match barrier.received.get(role) {
                Some((a, i)) => (a.clone(), *i, ActionSource::Submitted),
                None => {
                    let a = self
                        .def
                        .role(role)
                        .and_then(|r| r.default_action.clone())
                        .expect("controlling roles declare a default action");
                    let payload = json!({ "role": role, "controller": controller, "action": a });
                    self.push(fx, now, EventKind::TimeoutSubstitution, payload);
                    (a, None, ActionSource::Timeout)
                }
            };
            joint[*c as usize] = Some(action.clone());
            intentions[*c as usize] = intention;
            taken.push((*c, TakenAction { role: role.clone(), action, source }));
        }

        let empty = BTreeMap::new();
        let info = if self.step_in_episode == 0 { &empty } else { &self.info };
        for slot in self.agents.values_mut() {
            let c = slot.controls.unwrap_or(0);
            slot.agent.prepare(&AgentContext {
                env: &*self.env,
                observation: &self.observations[c as usize],
                controller: c,
                info,
                episode: self.episode,
                step: self.step_in_episode,
            });
        }
        self.commit_learners(now, fx);
        self.delegation_triggers(now, fx);

        let info = if self.step_in_episode == 0 { &empty } else { &self.info };
        let mut agent_events = Vec::new();
        for (role, c, controller) in &agent_driven {
            let slot = self.agents.get_mut(controller).expect("agent bindings have slots");
            let choice = slot.agent.act(
                &AgentContext {
                    env: &*self.env,
                    observation: &self.observations[*c as usize],
                    controller: *c,
                    info,
                    episode: self.episode,
                    step: self.step_in_episode,
                },
                &mut slot.rng,
            );
            agent_events.push(json!({
                "role": role,
                "agent": controller,
                "action": choice.action,
                "intention": choice.intention,
                "rng_cursor": slot.rng.cursor(),
            }));
            joint[*c as usize] = Some(choice.action.clone());
            intentions[*c as usize] = choice.intention;
            taken.push((
                *c,
                TakenAction {
                    role: role.clone(),
                    action: choice.action,
                    source: ActionSource::Agent,
                },
            ));
        }
        for payload in agent_events {
            self.push(fx, now, EventKind::AgentAction, payload);
        }

        let joint: Vec<Action> = joint
            .into_iter()
            .map(|a| a.expect("every controller is covered by exactly one role"))
            .collect();
        if self.caps.intentions {
            for (c, i) in intentions.iter().enumerate() {
                if let Err(e) = self.env.declare_intention(c, *i) {
                    tracing::debug!(controller = c, error = %e, "intention ignored");
                }
            }
        }
        let outcome = match self.env.step(&joint) {
            Ok(o) => o,
            Err(e) => return self.fail_env(now, fx, &e.to_string()),
        };
        let frame = match self.env.render() {
            Ok(f) => f,
            Err(e) => return self.fail_env(now, fx, &e.to_string()),
        };
        for (acc, r) in self.returns.iter_mut().zip(&outcome.rewards) {
            for (a, x) in acc.iter_mut().zip(r) {
                *a += x;
            }
        }
        self.observations = outcome.observations.clone();
        self.info = outcome.info.clone();
        taken.sort_by_key(|(c, _)| *c);
        let broadcast = StepBroadcast {
            actions: taken.iter().map(|(_, t)| t.clone()).collect(),
            observations: outcome.observations.clone(),
            rewards: outcome.rewards.clone(),
            terminated: outcome.terminated,
            truncated: outcome.truncated,
            info: outcome.info.clone(),
            frame,
        };
        let all = self.all_humans();
        self.send(fx, now, Self::server(), Payload::StepBroadcast(broadcast), all);
        self.last_broadcast_at = Some(now);

        for slot in self.agents.values_mut() {
            let Some(c) = slot.controls else { continue };
            let action = &joint[c as usize];
            slot.agent.record(
                action,
                &outcome.rewards[c as usize],
                &AgentContext {
                    env: &*self.env,
                    observation: &self.observations[c as usize],
                    controller: c,
                    info: &self.info,
                    episode: self.episode,
                    step: self.step_in_episode + 1,
                },
                outcome.terminated,
            );
        }

        let digest = self.state_digest();
        self.push(fx, now, EventKind::StateHash, json!({ "tick": self.tick, "digest": hex64(digest) }));
        self.tick += 1;
        self.step_in_episode += 1;

        if outcome.done() {
            self.in_episode = false;
            let end = EpisodeEnd {
                episode: self.episode,
                steps: self.step_in_episode,
                returns: self.returns.clone(),
                terminated: outcome.terminated,
                truncated: outcome.truncated,
            };
            let all = self.all_humans();
            self.send(fx, now, Self::server(), Payload::EpisodeEnd(end), all);
            self.episode += 1;
            if self.episode >= self.def.episodes {
                self.end_session(now, "completed", fx);
            } else {
                self.next_episode_at = Some(now + self.def.inter_episode_pause_ms);
            }
        } else {
            self.open_barrier(now, fx);
        }
    }

    /// Lets agents ask a human to take over their role (illustrative Q-value
    /// margin trigger).
    fn delegation_triggers(&mut self, now: u64, fx: &mut Effects) {
        let mut requests = Vec::new();
        for (role, slot) in &self.agents {
            let Some(target) = slot.agent.delegation_wanted() else { continue };
            let self_controlled = self.controller_of(role) == Some(role.as_str());
            let busy = self.open_requests.contains_key(role) || self.pending_delegation.contains_key(role);
            if self_controlled && !busy && self.is_human_bound(target) {
                requests.push((role.clone(), target.to_string()));
            }
        }
        for (role, target) in requests {
            self.open_requests.insert(
                role.clone(),
                OpenRequest {
                    target: target.clone(),
                    requester: role.clone(),
                },
            );
            let payload = Payload::DelegationRequest(DelegationRequest {
                role: role.clone(),
                target_role: target,
            });
            let all = self.all_humans();
            self.send(fx, now, Self::agent_sender(&role), payload, all);
        }
    }

    fn end_session(&mut self, now: u64, reason: &str, fx: &mut Effects) {
        self.in_episode = false;
        let payload = Payload::SessionEnd(SessionEnd {
            reason: reason.into(),
            completion_code: None,
            redirect: None,
        });
        let all = self.all_humans();
        self.send(fx, now, Self::server(), payload, all);
        self.commit_learners(now, fx);
        self.barrier = None;
        self.next_episode_at = None;
        self.ended = true;
    }

    fn fail_env(&mut self, now: u64, fx: &mut Effects, message: &str) {
        tracing::error!(session = %self.id, error = message, "environment failure");
        let payload = Payload::Error(ErrorPayload {
            code: "EnvError".into(),
            message: message.into(),
        });
        let all = self.all_humans();
        self.send(fx, now, Self::server(), payload, all);
        self.end_session(now, "env_error", fx);
    }

    /// Fires whichever timer is due: session timeout, the next episode, or
    /// the open barrier's deadline (or pacing interval).
    pub fn on_timer(&mut self, now: u64) -> Effects {
        let mut fx = Effects::default();
        if self.ended {
            return fx;
        }
        if now >= self.created_at.saturating_add(self.def.max_session_ms) {
            self.end_session(now, "timeout", &mut fx);
        } else if self.next_episode_at.is_some_and(|at| now >= at) {
            self.next_episode_at = None;
            self.start_episode(now, &mut fx);
        } else if let Some(b) = self.barrier.as_ref().filter(|b| now >= b.deadline) {
            let cause = if b.paced { ReleaseCause::Paced } else { ReleaseCause::Deadline };
            self.release(now, cause, &mut fx);
        }
        fx
    }

    /// Ends the session on an administrator's request.
    pub fn admin_end(&mut self, reason: &str, now: u64) -> Effects {
        let mut fx = Effects::default();
        if self.ended {
            return fx;
        }
        self.push(&mut fx, now, EventKind::AdminEnd, json!({ "reason": reason }));
        self.end_session(now, reason, &mut fx);
        fx
    }

    /// Stops the session after a storage failure. Nothing further is logged;
    /// connected humans get an `Error`.
    pub fn halt(&mut self, now: u64, detail: &str) -> Vec<Delivery> {
        self.ended = true;
        self.barrier = None;
        self.next_episode_at = None;
        let Target::Roles(roles) = self.all_humans() else { unreachable!() };
        let live: Vec<String> = roles
            .into_iter()
            .filter(|r| matches!(self.bindings.get(r), Some(Binding::Human { connected: true, .. })))
            .collect();
        if live.is_empty() {
            return Vec::new();
        }
        let envelope = Envelope::new(
            &self.id,
            Self::server(),
            None,
            Payload::Error(ErrorPayload {
                code: "StorageFailure".into(),
                message: detail.into(),
            }),
            now,
        );
        vec![Delivery {
            target: Target::Roles(live),
            envelope,
            cause: None,
        }]
    }
}

fn q_id(q: &OpenQuery) -> &str {
    &q.id
}
