//! Typed message layer between participant clients, the session server and
//! bridged environments.
//!
//! A frame is one JSON object:
//!
//! ```json
//! {"kind":"ActSubmit","payload":{"action":[1]},"protocol_version":1,
//!  "sender":{"controller_kind":"human","instance":0,"role_name":"driver"},
//!  "sent_at":1700000000000,"session_id":"s-1","tick":7}
//! ```
//!
//! `tick` is present exactly for the kinds listed in
//! [`MessageKind::carries_tick`]. Every kind has one payload schema; see
//! `docs/protocol.md` for an example frame per kind.

#[cfg(any(test, feature = "arbitrary"))]
pub mod arbitrary;
mod codec;
mod state;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::env::{Action, ActionSpace, Observation, RenderFrame};

pub use codec::{decode_envelope, encode_envelope};
pub use state::{validate_transition, Phase, ProtocolState};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("schema violation at `{field}`: {detail}")]
    SchemaViolation { field: String, detail: String },
    #[error("protocol version {found} is not supported (expected {PROTOCOL_VERSION})")]
    VersionMismatch { found: u64 },
    #[error("{kind} is not allowed in phase {phase:?}: {detail}")]
    ProtocolViolation {
        phase: Phase,
        kind: MessageKind,
        detail: String,
    },
}

macro_rules! message_kinds {
    ($($kind:ident),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum MessageKind {
            $($kind),*
        }

        impl MessageKind {
            pub const ALL: &'static [MessageKind] = &[$(MessageKind::$kind),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(MessageKind::$kind => stringify!($kind)),*
                }
            }

            pub fn parse(name: &str) -> Option<Self> {
                match name {
                    $(stringify!($kind) => Some(MessageKind::$kind),)*
                    _ => None,
                }
            }
        }
    };
}

message_kinds!(
    Join,
    JoinAck,
    RoleAssign,
    StartEpisode,
    ObserveBroadcast,
    ActRequest,
    ActSubmit,
    StepBroadcast,
    RewardAnnotation,
    ChannelMsg,
    DelegationRequest,
    DelegationGrant,
    DelegationRevoke,
    PrefQuery,
    PrefResponse,
    EpisodeEnd,
    SessionEnd,
    Heartbeat,
    Error,
);

impl MessageKind {
    /// Kinds whose envelope carries a non-null tick.
    pub fn carries_tick(self) -> bool {
        matches!(
            self,
            MessageKind::ActSubmit
                | MessageKind::StepBroadcast
                | MessageKind::RewardAnnotation
                | MessageKind::ChannelMsg
                | MessageKind::DelegationRequest
                | MessageKind::DelegationGrant
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for MessageKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MessageKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        MessageKind::parse(&name).ok_or_else(|| serde::de::Error::custom(format!("unknown message kind `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Human,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerId {
    pub role_name: String,
    pub controller_kind: ControllerKind,
    pub instance: u32,
}

impl ControllerId {
    pub fn human(role: &str) -> Self {
        Self {
            role_name: role.into(),
            controller_kind: ControllerKind::Human,
            instance: 0,
        }
    }

    pub fn agent(role: &str) -> Self {
        Self {
            role_name: role.into(),
            controller_kind: ControllerKind::Agent,
            instance: 0,
        }
    }
}

/// Either the literal string `"server"` or a controller id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Sender {
    Server,
    Controller(ControllerId),
}

impl Sender {
    pub fn controller(&self) -> Option<&ControllerId> {
        match self {
            Sender::Server => None,
            Sender::Controller(c) => Some(c),
        }
    }
}

impl Serialize for Sender {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Sender::Server => s.serialize_str("server"),
            Sender::Controller(c) => c.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Sender {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        match v {
            Value::String(s) if s == "server" => Ok(Sender::Server),
            Value::String(s) => Err(serde::de::Error::custom(format!("sender string must be \"server\", got `{s}`"))),
            other => ControllerId::deserialize(other)
                .map(Sender::Controller)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Widget {
    ActionPad,
    RewardButtons,
    Chat,
    RankingView,
    DelegationToggle,
    IntentionDisplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Submitted,
    Timeout,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TakenAction {
    pub role: String,
    pub action: Action,
    pub source: ActionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDescriptor {
    pub id: String,
    pub label: String,
    pub returns: Vec<f64>,
    pub actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<RenderFrame>,
}

// ---------------------------------------------------------------------------
// Payloads, one per kind
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Join {
    pub token: String,
    /// Requested role; absent means automatic assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub tick: u64,
    pub phase: Phase,
    pub episode: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<RenderFrame>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undelivered: Vec<Envelope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinAck {
    pub role: String,
    pub resumed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Box<Snapshot>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleAssign {
    pub role: String,
    pub controller: ControllerId,
    pub widgets: Vec<Widget>,
    /// Environment controller index this role acts for, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_space: Option<ActionSpace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartEpisode {
    pub episode: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveBroadcast {
    pub observations: Vec<Observation>,
    pub frame: RenderFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActRequest {
    pub tick: u64,
    /// Roles whose human controllers must act this tick.
    pub roles: Vec<String>,
    /// Absolute server time (ms) at which missing actions are substituted.
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActSubmit {
    pub action: Action,
    /// Role acted for; defaults to the sender's own role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    /// Declared target, for environments that accept intentions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intention: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepBroadcast {
    pub actions: Vec<TakenAction>,
    pub observations: Vec<Observation>,
    pub rewards: Vec<Vec<f64>>,
    pub terminated: bool,
    pub truncated: bool,
    #[serde(default)]
    pub info: BTreeMap<String, Value>,
    pub frame: RenderFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardAnnotation {
    /// +1 or -1.
    pub value: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMsg {
    pub channel: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegationRequest {
    pub role: String,
    /// Role whose bound controller should take over `role`.
    pub target_role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegationGrant {
    pub role: String,
    pub target_role: String,
    /// First tick at which the new controller is effective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegationRevoke {
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefQuery {
    pub query_id: String,
    pub target_role: String,
    pub items: Vec<TrajectoryDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefResponse {
    pub query_id: String,
    /// Item ids, most preferred first.
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEnd {
    pub episode: u32,
    pub steps: u32,
    /// Undiscounted return per controller.
    pub returns: Vec<Vec<f64>>,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEnd {
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redirect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heartbeat {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Join(Join),
    JoinAck(JoinAck),
    RoleAssign(RoleAssign),
    StartEpisode(StartEpisode),
    ObserveBroadcast(ObserveBroadcast),
    ActRequest(ActRequest),
    ActSubmit(ActSubmit),
    StepBroadcast(StepBroadcast),
    RewardAnnotation(RewardAnnotation),
    ChannelMsg(ChannelMsg),
    DelegationRequest(DelegationRequest),
    DelegationGrant(DelegationGrant),
    DelegationRevoke(DelegationRevoke),
    PrefQuery(PrefQuery),
    PrefResponse(PrefResponse),
    EpisodeEnd(EpisodeEnd),
    SessionEnd(SessionEnd),
    Heartbeat(Heartbeat),
    Error(ErrorPayload),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Join(_) => MessageKind::Join,
            Payload::JoinAck(_) => MessageKind::JoinAck,
            Payload::RoleAssign(_) => MessageKind::RoleAssign,
            Payload::StartEpisode(_) => MessageKind::StartEpisode,
            Payload::ObserveBroadcast(_) => MessageKind::ObserveBroadcast,
            Payload::ActRequest(_) => MessageKind::ActRequest,
            Payload::ActSubmit(_) => MessageKind::ActSubmit,
            Payload::StepBroadcast(_) => MessageKind::StepBroadcast,
            Payload::RewardAnnotation(_) => MessageKind::RewardAnnotation,
            Payload::ChannelMsg(_) => MessageKind::ChannelMsg,
            Payload::DelegationRequest(_) => MessageKind::DelegationRequest,
            Payload::DelegationGrant(_) => MessageKind::DelegationGrant,
            Payload::DelegationRevoke(_) => MessageKind::DelegationRevoke,
            Payload::PrefQuery(_) => MessageKind::PrefQuery,
            Payload::PrefResponse(_) => MessageKind::PrefResponse,
            Payload::EpisodeEnd(_) => MessageKind::EpisodeEnd,
            Payload::SessionEnd(_) => MessageKind::SessionEnd,
            Payload::Heartbeat(_) => MessageKind::Heartbeat,
            Payload::Error(_) => MessageKind::Error,
        }
    }

    pub fn to_value(&self) -> Value {
        let v = match self {
            Payload::Join(p) => serde_json::to_value(p),
            Payload::JoinAck(p) => serde_json::to_value(p),
            Payload::RoleAssign(p) => serde_json::to_value(p),
            Payload::StartEpisode(p) => serde_json::to_value(p),
            Payload::ObserveBroadcast(p) => serde_json::to_value(p),
            Payload::ActRequest(p) => serde_json::to_value(p),
            Payload::ActSubmit(p) => serde_json::to_value(p),
            Payload::StepBroadcast(p) => serde_json::to_value(p),
            Payload::RewardAnnotation(p) => serde_json::to_value(p),
            Payload::ChannelMsg(p) => serde_json::to_value(p),
            Payload::DelegationRequest(p) => serde_json::to_value(p),
            Payload::DelegationGrant(p) => serde_json::to_value(p),
            Payload::DelegationRevoke(p) => serde_json::to_value(p),
            Payload::PrefQuery(p) => serde_json::to_value(p),
            Payload::PrefResponse(p) => serde_json::to_value(p),
            Payload::EpisodeEnd(p) => serde_json::to_value(p),
            Payload::SessionEnd(p) => serde_json::to_value(p),
            Payload::Heartbeat(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
        };
        v.expect("payloads are JSON-representable")
    }

    /// Deserializes the payload schema of `kind`, reporting the path of the
    /// first offending field.
    pub fn from_value(kind: MessageKind, value: Value) -> Result<Self, ProtocolError> {
        fn de<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, ProtocolError> {
            serde_path_to_error::deserialize(value).map_err(|e| {
                let path = e.path().to_string();
                let inner = e.into_inner().to_string();
                let field = match inner.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                    Some(missing) if path == "." => missing.to_string(),
                    Some(missing) => format!("{path}.{missing}"),
                    None => path,
                };
                ProtocolError::SchemaViolation {
                    field: format!("payload.{field}").replace("payload..", "payload."),
                    detail: inner,
                }
            })
        }
        Ok(match kind {
            MessageKind::Join => Payload::Join(de(value)?),
            MessageKind::JoinAck => Payload::JoinAck(de(value)?),
            MessageKind::RoleAssign => Payload::RoleAssign(de(value)?),
            MessageKind::StartEpisode => Payload::StartEpisode(de(value)?),
            MessageKind::ObserveBroadcast => Payload::ObserveBroadcast(de(value)?),
            MessageKind::ActRequest => Payload::ActRequest(de(value)?),
            MessageKind::ActSubmit => Payload::ActSubmit(de(value)?),
            MessageKind::StepBroadcast => Payload::StepBroadcast(de(value)?),
            MessageKind::RewardAnnotation => Payload::RewardAnnotation(de(value)?),
            MessageKind::ChannelMsg => Payload::ChannelMsg(de(value)?),
            MessageKind::DelegationRequest => Payload::DelegationRequest(de(value)?),
            MessageKind::DelegationGrant => Payload::DelegationGrant(de(value)?),
            MessageKind::DelegationRevoke => Payload::DelegationRevoke(de(value)?),
            MessageKind::PrefQuery => Payload::PrefQuery(de(value)?),
            MessageKind::PrefResponse => Payload::PrefResponse(de(value)?),
            MessageKind::EpisodeEnd => Payload::EpisodeEnd(de(value)?),
            MessageKind::SessionEnd => Payload::SessionEnd(de(value)?),
            MessageKind::Heartbeat => Payload::Heartbeat(de(value)?),
            MessageKind::Error => Payload::Error(de(value)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub protocol_version: u32,
    pub session_id: String,
    pub sender: Sender,
    pub tick: Option<u64>,
    pub payload: Payload,
    /// Milliseconds since the Unix epoch, as stamped by the sender.
    pub sent_at: u64,
}

impl Envelope {
    pub fn new(session_id: &str, sender: Sender, tick: Option<u64>, payload: Payload, sent_at: u64) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            session_id: session_id.into(),
            sender,
            tick,
            payload,
            sent_at,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// Checks the envelope-level invariants: supported version and tick
    /// presence matching the kind.
    pub fn validate(&self) -> Result<(), String> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(format!(
                "protocol_version {} != {PROTOCOL_VERSION}",
                self.protocol_version
            ));
        }
        let kind = self.kind();
        match (kind.carries_tick(), self.tick.is_some()) {
            (true, false) => return Err(format!("{kind} requires a tick")),
            (false, true) => return Err(format!("{kind} must not carry a tick")),
            _ => {}
        }
        if let Payload::RewardAnnotation(a) = &self.payload {
            if a.value != 1 && a.value != -1 {
                return Err(format!("annotation value must be +1 or -1, got {}", a.value));
            }
        }
        Ok(())
    }

    /// The role an `ActSubmit` acts for: the explicit payload role, else the
    /// sender's role.
    pub fn acting_role(&self) -> Option<&str> {
        match &self.payload {
            Payload::ActSubmit(p) => p
                .role
                .as_deref()
                .or_else(|| self.sender.controller().map(|c| c.role_name.as_str())),
            _ => None,
        }
    }
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        codec::to_wire_value(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        codec::from_wire_value(v).map_err(serde::de::Error::custom)
    }
}
