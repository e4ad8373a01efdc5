//! Offline re-execution of a log and trajectory export.

use serde_json::Value;
use thiserror::Error;

use super::{CorruptLog, Event, EventKind, LogFile};
use crate::agents::{Trajectory, TrajectoryStep};
use crate::config::ExperimentDef;
use crate::env::Observation;
use crate::hash::parse_hex64;
use crate::orchestrator::{episode_seed, Effects, Session, SessionParams};
use crate::protocol::{MessageKind, Payload};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("corrupt log: {0}")]
    Corrupt(#[from] CorruptLog),
    #[error("state hash mismatch at tick {tick} (seq {seq}): logged {logged:016x}, recomputed {recomputed:016x}")]
    HashMismatch {
        tick: u64,
        seq: u64,
        logged: u64,
        recomputed: u64,
    },
    #[error("replay diverged at seq {seq}: {detail}")]
    Diverged { seq: u64, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub session_id: String,
    /// Recomputed `(tick, digest)` for every logged tick, in order.
    pub hashes: Vec<(u64, u64)>,
    pub events_checked: usize,
    /// Set when the log ended inside an event group (crash or truncation).
    pub truncated: bool,
}

struct Created {
    def: ExperimentDef,
    condition: Option<String>,
    master_seed: u64,
}

fn created(log: &LogFile) -> Result<Created, CorruptLog> {
    let first = log
        .events
        .first()
        .filter(|e| e.kind == EventKind::SessionCreated)
        .ok_or_else(|| CorruptLog::Invalid("first event is not SessionCreated".into()))?;
    let p = &first.payload;
    let def: ExperimentDef = p
        .get("experiment")
        .cloned()
        .ok_or_else(|| CorruptLog::Invalid("SessionCreated lacks the experiment".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| CorruptLog::Invalid(format!("embedded experiment: {e}"))))?;
    if def.experiment_hash() != log.header.experiment_hash {
        return Err(CorruptLog::Invalid("embedded experiment does not match the header hash".into()));
    }
    if p.get("master_seed").and_then(Value::as_u64) != Some(log.header.master_seed) {
        return Err(CorruptLog::Invalid("master seed differs between header and SessionCreated".into()));
    }
    Ok(Created {
        def,
        condition: p.get("condition").and_then(Value::as_str).map(str::to_string),
        master_seed: log.header.master_seed,
    })
}

fn digest_of(e: &Event) -> Option<u64> {
    e.payload.get("digest").and_then(Value::as_str).and_then(parse_hex64)
}

/// Compares a regenerated group against the log from `start`. Returns the
/// number of logged events it covered.
fn check_group(
    generated: &[Event],
    logged: &[Event],
    start: usize,
    report: &mut ReplayReport,
) -> Result<usize, ReplayError> {
    let mut content_diff: Option<(u64, String)> = None;
    let mut covered = 0;
    for (i, gen) in generated.iter().enumerate() {
        let Some(log) = logged.get(start + i) else {
            report.truncated = true;
            break;
        };
        covered += 1;
        if gen.seq != log.seq || gen.kind != log.kind {
            return Err(ReplayError::Diverged {
                seq: log.seq,
                detail: format!("logged {} but replay produced {}", log.kind, gen.kind),
            });
        }
        if gen.kind == EventKind::StateHash {
            let (Some(l), Some(r)) = (digest_of(log), digest_of(gen)) else {
                return Err(CorruptLog::Invalid(format!("seq {}: malformed state hash", log.seq)).into());
            };
            let tick = log.tick.unwrap_or_default();
            if l != r {
                return Err(ReplayError::HashMismatch {
                    tick,
                    seq: log.seq,
                    logged: l,
                    recomputed: r,
                });
            }
            report.hashes.push((tick, r));
        }
        if content_diff.is_none() && gen.to_line() != log.to_line() {
            content_diff = Some((log.seq, format!("{} payload differs", log.kind)));
        }
    }
    report.events_checked += covered;
    match content_diff {
        Some((seq, detail)) => Err(ReplayError::Diverged { seq, detail }),
        None => Ok(covered),
    }
}

/// Re-executes the session from its log: logged inputs and timer firings
/// are fed back at their logged wall times, and every regenerated event is
/// checked against the log. State hashes are compared first, so tampering
/// with an input surfaces as a [`ReplayError::HashMismatch`] at the first
/// affected tick.
pub fn replay(log: &LogFile) -> Result<ReplayReport, ReplayError> {
    let c = created(log)?;
    let events = &log.events;
    let params = SessionParams {
        session_id: log.header.session_id.clone(),
        def: c.def,
        condition: c.condition,
        master_seed: c.master_seed,
        verify_tokens: false,
    };
    let (mut session, fx) = Session::create(params, events[0].wall_time_ms).map_err(|e| ReplayError::Diverged {
        seq: 0,
        detail: e.to_string(),
    })?;
    let mut report = ReplayReport {
        session_id: log.header.session_id.clone(),
        hashes: Vec::new(),
        events_checked: 0,
        truncated: false,
    };
    let mut cursor = check_group(&fx.events, events, 0, &mut report)?;
    while cursor < events.len() {
        let head = &events[cursor];
        let now = head.wall_time_ms;
        let fx: Effects = match head.kind {
            EventKind::InputRejected => {
                session.absorb_rejection();
                report.events_checked += 1;
                cursor += 1;
                continue;
            }
            EventKind::BarrierRelease
            | EventKind::Message(MessageKind::StartEpisode)
            | EventKind::Message(MessageKind::SessionEnd) => session.on_timer(now),
            EventKind::Disconnect => {
                let role = head.payload.get("role").and_then(Value::as_str).unwrap_or_default();
                session.disconnect(role, now)
            }
            EventKind::AdminEnd => {
                let reason = head.payload.get("reason").and_then(Value::as_str).unwrap_or_default();
                session.admin_end(reason, now)
            }
            EventKind::Resume | EventKind::Message(_) => {
                let envelope = head.envelope().ok_or_else(|| {
                    ReplayError::Corrupt(CorruptLog::Invalid(format!("seq {}: payload is not an envelope", head.seq)))
                })?;
                session.handle_input(envelope, now)
            }
            other => {
                return Err(ReplayError::Diverged {
                    seq: head.seq,
                    detail: format!("{other} cannot start an event group"),
                })
            }
        };
        if fx.events.is_empty() {
            return Err(ReplayError::Diverged {
                seq: head.seq,
                detail: format!("{} had no effect on replay", head.kind),
            });
        }
        if let Some(e) = fx.rejected {
            return Err(ReplayError::Diverged {
                seq: head.seq,
                detail: format!("logged input was rejected on replay: {e}"),
            });
        }
        cursor += check_group(&fx.events, events, cursor, &mut report)?;
    }
    Ok(report)
}

/// One trajectory per finished episode, from controller 0's point of view.
pub fn export_trajectories(log: &LogFile) -> Result<Vec<Trajectory>, ReplayError> {
    export_trajectories_for(log, 0)
}

pub fn export_trajectories_for(log: &LogFile, controller: usize) -> Result<Vec<Trajectory>, ReplayError> {
    let c = created(log)?;
    let mut out = Vec::new();
    let mut current: Option<Trajectory> = None;
    let mut last_obs: Option<Observation> = None;
    for e in &log.events {
        let EventKind::Message(kind) = e.kind else { continue };
        if !matches!(
            kind,
            MessageKind::StartEpisode | MessageKind::ObserveBroadcast | MessageKind::StepBroadcast | MessageKind::EpisodeEnd
        ) {
            continue;
        }
        let envelope = e
            .envelope()
            .ok_or_else(|| CorruptLog::Invalid(format!("seq {}: payload is not an envelope", e.seq)))?;
        match envelope.payload {
            Payload::StartEpisode(s) => {
                current = Some(Trajectory::new(&c.def.env.id, episode_seed(c.master_seed, s.episode)));
            }
            Payload::ObserveBroadcast(o) => last_obs = o.observations.get(controller).cloned(),
            Payload::StepBroadcast(s) => {
                let (Some(t), Some(obs)) = (current.as_mut(), last_obs.take()) else {
                    return Err(CorruptLog::Invalid(format!("seq {}: step outside an episode", e.seq)).into());
                };
                let role_for = |role: &str| c.def.role(role).and_then(|r| r.controls);
                let action = s
                    .actions
                    .iter()
                    .find(|a| role_for(&a.role) == Some(controller as u32))
                    .map(|a| a.action.clone())
                    .ok_or_else(|| CorruptLog::Invalid(format!("seq {}: no action for controller {controller}", e.seq)))?;
                t.push(TrajectoryStep {
                    observation: obs,
                    action,
                    reward: s.rewards.get(controller).cloned().unwrap_or_default(),
                    state_key: None,
                });
                last_obs = s.observations.get(controller).cloned();
            }
            Payload::EpisodeEnd(_) => out.extend(current.take()),
            _ => {}
        }
    }
    Ok(out)
}
