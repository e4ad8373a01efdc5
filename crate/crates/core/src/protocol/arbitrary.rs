//! Proptest strategies producing valid envelopes of every kind.

use std::collections::BTreeMap;

use proptest::collection::{btree_map, vec};
use proptest::option;
use proptest::prelude::*;
use serde_json::Value;

use super::*;
use crate::env::{Cell, Gauge, Numbers, RenderMode, Sprite};

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn text() -> impl Strategy<Value = String> {
    "\\PC{0,16}"
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        (-1000i32..1000).prop_map(f64::from),
        Just(-0.0),
        Just(0.5e-300),
        Just(1.7976931348623157e308),
    ]
}

fn numbers() -> impl Strategy<Value = Numbers> {
    vec(finite(), 0..4).prop_map(Numbers)
}

fn action() -> impl Strategy<Value = Action> {
    numbers().prop_map(Action)
}

fn observation() -> impl Strategy<Value = Observation> {
    numbers().prop_map(Observation)
}

fn json_leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        finite().prop_map(Value::from),
        text().prop_map(Value::from),
    ]
}

fn info() -> impl Strategy<Value = BTreeMap<String, Value>> {
    btree_map(ident(), json_leaf(), 0..3)
}

pub fn render_frame() -> impl Strategy<Value = RenderFrame> {
    let mode = prop_oneof![
        Just(RenderMode::Grid),
        Just(RenderMode::SpriteList),
        Just(RenderMode::ScalarGauge)
    ];
    let cell = (0u32..8, 0u32..8, ident(), option::of(0u8..16), option::of(text()))
        .prop_map(|(x, y, tag, walls, label)| Cell { x, y, tag, walls, label });
    let sprite =
        (0u32..8, 0u32..8, ident(), option::of(any::<u32>())).prop_map(|(x, y, tag, id)| Sprite { x, y, tag, id });
    let gauge = (ident(), finite(), finite(), finite()).prop_map(|(name, value, min, max)| Gauge {
        name,
        value,
        min,
        max,
    });
    (
        mode,
        0u32..9,
        0u32..9,
        vec(cell, 0..3),
        vec(sprite, 0..3),
        vec(gauge, 0..2),
        vec(text(), 0..2),
    )
        .prop_map(|(mode, width, height, cells, sprites, gauges, overlay_text)| RenderFrame {
            mode,
            width,
            height,
            cells,
            sprites,
            gauges,
            overlay_text,
        })
}

pub fn controller_id() -> impl Strategy<Value = ControllerId> {
    (
        ident(),
        prop_oneof![Just(ControllerKind::Human), Just(ControllerKind::Agent)],
        0u32..4,
    )
        .prop_map(|(role_name, controller_kind, instance)| ControllerId {
            role_name,
            controller_kind,
            instance,
        })
}

fn sender() -> impl Strategy<Value = Sender> {
    prop_oneof![Just(Sender::Server), controller_id().prop_map(Sender::Controller)]
}

fn action_space() -> impl Strategy<Value = ActionSpace> {
    prop_oneof![
        (1u32..10).prop_map(|n| ActionSpace::Discrete { n }),
        (-5.0..0.0f64, 0.0..5.0f64).prop_map(|(low, high)| ActionSpace::Interval { low, high }),
    ]
}

fn widget() -> impl Strategy<Value = Widget> {
    prop_oneof![
        Just(Widget::ActionPad),
        Just(Widget::RewardButtons),
        Just(Widget::Chat),
        Just(Widget::RankingView),
        Just(Widget::DelegationToggle),
        Just(Widget::IntentionDisplay),
    ]
}

fn trajectory() -> impl Strategy<Value = TrajectoryDescriptor> {
    (ident(), text(), vec(finite(), 1..3), vec(action(), 0..3), vec(render_frame(), 0..2)).prop_map(
        |(id, label, returns, actions, frames)| TrajectoryDescriptor {
            id,
            label,
            returns,
            actions,
            frames,
        },
    )
}

fn phase() -> impl Strategy<Value = Phase> {
    prop_oneof![
        Just(Phase::Lobby),
        Just(Phase::Assigned),
        Just(Phase::InEpisode),
        Just(Phase::AwaitingActions),
        Just(Phase::BetweenEpisodes),
        Just(Phase::Ended),
    ]
}

/// Payloads that cannot nest another envelope.
fn flat_payload() -> impl Strategy<Value = Payload> {
    let rewards = || vec(vec(finite(), 1..3), 0..3);
    prop_oneof![
        (text(), option::of(ident())).prop_map(|(token, role)| Payload::Join(Join { token, role })),
        (ident(), controller_id(), vec(widget(), 0..4), option::of(0u32..4), option::of(action_space()), vec(ident(), 0..2))
            .prop_map(|(role, controller, widgets, controls, action_space, channels)| {
                Payload::RoleAssign(RoleAssign { role, controller, widgets, controls, action_space, channels })
            }),
        any::<u32>().prop_map(|episode| Payload::StartEpisode(StartEpisode { episode })),
        (vec(observation(), 0..3), render_frame())
            .prop_map(|(observations, frame)| Payload::ObserveBroadcast(ObserveBroadcast { observations, frame })),
        (any::<u64>(), vec(ident(), 0..3), any::<u64>())
            .prop_map(|(tick, roles, deadline_ms)| Payload::ActRequest(ActRequest { tick, roles, deadline_ms })),
        (action(), option::of(ident()), option::of(0u32..8))
            .prop_map(|(action, role, intention)| Payload::ActSubmit(ActSubmit { action, role, intention })),
        (
            vec(
                (ident(), action(), prop_oneof![Just(ActionSource::Submitted), Just(ActionSource::Timeout), Just(ActionSource::Agent)]),
                0..3
            ),
            vec(observation(), 0..3),
            rewards(),
            any::<bool>(),
            any::<bool>(),
            info(),
            render_frame(),
        )
            .prop_map(|(actions, observations, rewards, terminated, truncated, info, frame)| {
                Payload::StepBroadcast(StepBroadcast {
                    actions: actions
                        .into_iter()
                        .map(|(role, action, source)| TakenAction { role, action, source })
                        .collect(),
                    observations,
                    rewards,
                    terminated,
                    truncated,
                    info,
                    frame,
                })
            }),
        prop_oneof![Just(1i8), Just(-1i8)].prop_map(|value| Payload::RewardAnnotation(RewardAnnotation { value })),
        (ident(), text()).prop_map(|(channel, content)| Payload::ChannelMsg(ChannelMsg { channel, content })),
        (ident(), ident()).prop_map(|(role, target_role)| Payload::DelegationRequest(DelegationRequest { role, target_role })),
        (ident(), ident(), option::of(any::<u64>())).prop_map(|(role, target_role, effective_tick)| {
            Payload::DelegationGrant(DelegationGrant { role, target_role, effective_tick })
        }),
        (ident(), option::of(any::<u64>()))
            .prop_map(|(role, effective_tick)| Payload::DelegationRevoke(DelegationRevoke { role, effective_tick })),
        (ident(), ident(), vec(trajectory(), 0..3))
            .prop_map(|(query_id, target_role, items)| Payload::PrefQuery(PrefQuery { query_id, target_role, items })),
        (ident(), vec(ident(), 0..4)).prop_map(|(query_id, ranking)| Payload::PrefResponse(PrefResponse { query_id, ranking })),
        (any::<u32>(), any::<u32>(), rewards(), any::<bool>(), any::<bool>()).prop_map(
            |(episode, steps, returns, terminated, truncated)| {
                Payload::EpisodeEnd(EpisodeEnd { episode, steps, returns, terminated, truncated })
            }
        ),
        (text(), option::of("[A-Z2-7]{12}"), option::of(text())).prop_map(|(reason, completion_code, redirect)| {
            Payload::SessionEnd(SessionEnd { reason, completion_code, redirect })
        }),
        Just(Payload::Heartbeat(Heartbeat {})),
        (ident(), text()).prop_map(|(code, message)| Payload::Error(ErrorPayload { code, message })),
    ]
}

fn envelope_from(payload: impl Strategy<Value = Payload>) -> impl Strategy<Value = Envelope> {
    (ident(), sender(), any::<u64>(), payload, any::<u64>()).prop_map(|(session_id, sender, tick, payload, sent_at)| {
        let tick = payload.kind().carries_tick().then_some(tick);
        Envelope::new(&session_id, sender, tick, payload, sent_at)
    })
}

fn payload() -> impl Strategy<Value = Payload> {
    let snapshot = (
        any::<u64>(),
        phase(),
        any::<u32>(),
        option::of(observation()),
        option::of(render_frame()),
        vec(envelope_from(flat_payload()), 0..2),
    )
        .prop_map(|(tick, phase, episode, observation, frame, undelivered)| Snapshot {
            tick,
            phase,
            episode,
            observation,
            frame,
            undelivered,
        });
    let join_ack = (ident(), any::<bool>(), option::of(snapshot)).prop_map(|(role, resumed, snapshot)| {
        Payload::JoinAck(JoinAck {
            role,
            resumed,
            snapshot: snapshot.map(Box::new),
        })
    });
    prop_oneof![18 => flat_payload(), 1 => join_ack]
}

/// Any valid envelope; each of the 19 kinds is reachable.
pub fn envelope() -> impl Strategy<Value = Envelope> {
    envelope_from(payload())
}
