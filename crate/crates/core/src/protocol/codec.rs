use serde_json::{Map, Value};

use super::{Envelope, MessageKind, Payload, ProtocolError, Sender, PROTOCOL_VERSION};
use crate::hash::canonical_json;

const TOP_LEVEL_FIELDS: [&str; 7] = ["protocol_version", "session_id", "sender", "tick", "kind", "payload", "sent_at"];

pub(super) fn to_wire_value(env: &Envelope) -> Value {
    let mut m = Map::new();
    m.insert("protocol_version".into(), Value::from(env.protocol_version));
    m.insert("session_id".into(), Value::from(env.session_id.clone()));
    m.insert(
        "sender".into(),
        serde_json::to_value(&env.sender).expect("sender serializes"),
    );
    if let Some(t) = env.tick {
        m.insert("tick".into(), Value::from(t));
    }
    m.insert("kind".into(), Value::from(env.kind().as_str()));
    m.insert("payload".into(), env.payload.to_value());
    m.insert("sent_at".into(), Value::from(env.sent_at));
    Value::Object(m)
}

/// Canonical frame: keys sorted, compact, UTF-8, no trailing newline.
pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    env.validate().map_err(ProtocolError::InvalidEnvelope)?;
    Ok(canonical_json(&to_wire_value(env)).into_bytes())
}

pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| ProtocolError::MalformedFrame(e.to_string()))?;
    from_wire_value(value)
}

fn schema(field: &str, detail: impl Into<String>) -> ProtocolError {
    ProtocolError::SchemaViolation {
        field: field.into(),
        detail: detail.into(),
    }
}

pub(super) fn from_wire_value(value: Value) -> Result<Envelope, ProtocolError> {
    let Value::Object(mut m) = value else {
        return Err(ProtocolError::MalformedFrame("frame is not a JSON object".into()));
    };
    if let Some(extra) = m.keys().find(|k| !TOP_LEVEL_FIELDS.contains(&k.as_str())) {
        return Err(schema(extra, "unknown top-level field"));
    }
    let version = m
        .get("protocol_version")
        .ok_or_else(|| schema("protocol_version", "missing"))?
        .as_u64()
        .ok_or_else(|| schema("protocol_version", "must be a non-negative integer"))?;
    if version != u64::from(PROTOCOL_VERSION) {
        return Err(ProtocolError::VersionMismatch { found: version });
    }
    let kind_name = match m.get("kind") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(schema("kind", "must be a string")),
        None => return Err(schema("kind", "missing")),
    };
    let kind = MessageKind::parse(&kind_name).ok_or(ProtocolError::UnknownKind(kind_name))?;
    let session_id = match m.remove("session_id") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(schema("session_id", "must be a string")),
        None => return Err(schema("session_id", "missing")),
    };
    let sender: Sender = serde_json::from_value(m.remove("sender").ok_or_else(|| schema("sender", "missing"))?)
        .map_err(|e| schema("sender", e.to_string()))?;
    let tick = match m.remove("tick") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| schema("tick", "must be a non-negative integer"))?),
    };
    let sent_at = m
        .remove("sent_at")
        .ok_or_else(|| schema("sent_at", "missing"))?
        .as_u64()
        .ok_or_else(|| schema("sent_at", "must be a non-negative integer"))?;
    let payload_value = m.remove("payload").ok_or_else(|| schema("payload", "missing"))?;
    if !payload_value.is_object() {
        return Err(schema("payload", "must be an object"));
    }
    let payload = Payload::from_value(kind, payload_value)?;
    let env = Envelope {
        protocol_version: PROTOCOL_VERSION,
        session_id,
        sender,
        tick,
        payload,
        sent_at,
    };
    env.validate().map_err(|detail| {
        let field = if detail.contains("tick") { "tick" } else { "payload.value" };
        schema(field, detail)
    })?;
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Action;
    use crate::protocol::{ActSubmit, ControllerId, Heartbeat, Join};

    fn heartbeat() -> Envelope {
        Envelope::new("s-1", Sender::Server, None, Payload::Heartbeat(Heartbeat {}), 5)
    }

    #[test]
    fn heartbeat_has_no_tick_field() {
        let bytes = encode_envelope(&heartbeat()).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"kind\":\"Heartbeat\""));
        assert!(!text.contains("tick"));
        assert_eq!(decode_envelope(&bytes).unwrap(), heartbeat());
    }

    #[test]
    fn act_submit_round_trip() {
        let env = Envelope::new(
            "s-1",
            Sender::Controller(ControllerId::human("driver")),
            Some(7),
            Payload::ActSubmit(ActSubmit {
                action: Action::discrete(1),
                role: None,
                intention: None,
            }),
            1_000,
        );
        let bytes = encode_envelope(&env).unwrap();
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.contains("\"tick\":7"));
        assert!(text.contains("\"payload\":{\"action\":[1]}"));
        assert_eq!(decode_envelope(&bytes).unwrap(), env);
    }

    #[test]
    fn version_two_cannot_be_encoded_or_decoded() {
        let mut env = heartbeat();
        env.protocol_version = 2;
        assert!(matches!(encode_envelope(&env), Err(ProtocolError::InvalidEnvelope(_))));
        let frame = br#"{"kind":"Heartbeat","payload":{},"protocol_version":2,"sender":"server","sent_at":0,"session_id":"s"}"#;
        assert_eq!(decode_envelope(frame), Err(ProtocolError::VersionMismatch { found: 2 }));
    }

    #[test]
    fn tick_presence_is_enforced() {
        let mut env = heartbeat();
        env.tick = Some(3);
        assert!(encode_envelope(&env).is_err());
        let frame = br#"{"kind":"ActSubmit","payload":{"action":[1]},"protocol_version":1,"sender":"server","sent_at":0,"session_id":"s"}"#;
        assert!(matches!(
            decode_envelope(frame),
            Err(ProtocolError::SchemaViolation { field, .. }) if field == "tick"
        ));
    }

    #[test]
    fn unknown_kind() {
        let frame = br#"{"kind":"Dance","payload":{},"protocol_version":1,"sender":"server","sent_at":0,"session_id":"s"}"#;
        assert_eq!(decode_envelope(frame), Err(ProtocolError::UnknownKind("Dance".into())));
    }

    #[test]
    fn missing_action_names_the_field() {
        let frame = br#"{"kind":"ActSubmit","payload":{},"protocol_version":1,"sender":"server","sent_at":0,"session_id":"s","tick":1}"#;
        match decode_envelope(frame) {
            Err(ProtocolError::SchemaViolation { field, .. }) => assert_eq!(field, "payload.action"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nested_schema_errors_carry_a_path() {
        let frame = br#"{"kind":"Join","payload":{"token":7},"protocol_version":1,"sender":"server","sent_at":0,"session_id":"s"}"#;
        match decode_envelope(frame) {
            Err(ProtocolError::SchemaViolation { field, .. }) => assert_eq!(field, "payload.token"),
            other => panic!("unexpected {other:?}"),
        }
        let ok = Envelope::new(
            "s",
            Sender::Server,
            None,
            Payload::Join(Join {
                token: "t".into(),
                role: None,
            }),
            0,
        );
        assert!(encode_envelope(&ok).is_ok());
    }

    #[test]
    fn malformed_and_non_object_frames() {
        assert!(matches!(decode_envelope(b"{nope"), Err(ProtocolError::MalformedFrame(_))));
        assert!(matches!(decode_envelope(b"[1,2]"), Err(ProtocolError::MalformedFrame(_))));
        let extra = br#"{"kind":"Heartbeat","payload":{},"protocol_version":1,"sender":"server","sent_at":0,"session_id":"s","x":1}"#;
        assert!(matches!(decode_envelope(extra), Err(ProtocolError::SchemaViolation { .. })));
    }

    #[test]
    fn annotation_values_are_plus_or_minus_one() {
        let frame = br#"{"kind":"RewardAnnotation","payload":{"value":2},"protocol_version":1,"sender":"server","sent_at":0,"session_id":"s","tick":0}"#;
        assert!(matches!(decode_envelope(frame), Err(ProtocolError::SchemaViolation { .. })));
    }
}
