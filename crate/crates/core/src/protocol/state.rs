//! Per-session protocol phase machine.
//!
//! | phase            | accepted kinds                                   | next phase        |
//! |------------------|--------------------------------------------------|-------------------|
//! | any but Ended    | Heartbeat, Error                                 | unchanged         |
//! | Lobby, Assigned  | Join                                             | Assigned          |
//! | Assigned         | JoinAck, RoleAssign                              | Assigned          |
//! | any but Lobby    | JoinAck with `resumed`                           | unchanged         |
//! | Assigned, Between| StartEpisode                                     | InEpisode         |
//! | InEpisode        | ActRequest                                       | AwaitingActions   |
//! | AwaitingActions  | ActSubmit for an outstanding role                | InEpisode when none remain |
//! | InEpisode, Awaiting | StepBroadcast                                 | InEpisode         |
//! | InEpisode        | EpisodeEnd                                       | BetweenEpisodes   |
//! | any but Ended    | SessionEnd                                       | Ended             |
//!
//! Observations, annotations, channel and delegation traffic are accepted
//! while an episode is live or between episodes. Preference queries may be
//! opened from `Assigned` onward; a response must name an open query.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Envelope, Payload, ProtocolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Lobby,
    Assigned,
    InEpisode,
    AwaitingActions,
    BetweenEpisodes,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolState {
    pub phase: Phase,
    /// Roles still owing an action for the current tick.
    pub outstanding: BTreeSet<String>,
    pub open_queries: BTreeSet<String>,
}

impl Default for ProtocolState {
    fn default() -> Self {
        Self::lobby()
    }
}

impl ProtocolState {
    pub fn lobby() -> Self {
        Self {
            phase: Phase::Lobby,
            outstanding: BTreeSet::new(),
            open_queries: BTreeSet::new(),
        }
    }

    /// Folds a whole frame sequence, stopping at the first violation.
    pub fn replay<'a>(frames: impl IntoIterator<Item = &'a Envelope>) -> Result<Self, ProtocolError> {
        frames
            .into_iter()
            .try_fold(Self::lobby(), |s, env| validate_transition(&s, env))
    }
}

fn live(phase: Phase) -> bool {
    matches!(phase, Phase::InEpisode | Phase::AwaitingActions | Phase::BetweenEpisodes)
}

pub fn validate_transition(state: &ProtocolState, incoming: &Envelope) -> Result<ProtocolState, ProtocolError> {
    use Phase::*;
    let kind = incoming.kind();
    let phase = state.phase;
    let reject = |detail: &str| ProtocolError::ProtocolViolation {
        phase,
        kind,
        detail: detail.into(),
    };
    if phase == Ended {
        return Err(reject("session has ended"));
    }
    let mut next = state.clone();
    match &incoming.payload {
        Payload::Heartbeat(_) | Payload::Error(_) => {}
        Payload::Join(_) => match phase {
            Lobby | Assigned => next.phase = Assigned,
            _ => return Err(reject("joining is only possible before the first episode")),
        },
        Payload::JoinAck(ack) if ack.resumed => {
            if phase == Lobby {
                return Err(reject("nothing to resume"));
            }
        }
        Payload::JoinAck(_) | Payload::RoleAssign(_) => {
            if phase != Assigned {
                return Err(reject("must follow a Join"));
            }
        }
        Payload::StartEpisode(_) => match phase {
            Assigned | BetweenEpisodes => next.phase = InEpisode,
            _ => return Err(reject("an episode is already running or no one joined")),
        },
        Payload::ObserveBroadcast(_)
        | Payload::RewardAnnotation(_)
        | Payload::ChannelMsg(_)
        | Payload::DelegationRequest(_)
        | Payload::DelegationGrant(_)
        | Payload::DelegationRevoke(_) => {
            if !live(phase) {
                return Err(reject("no episode has started"));
            }
        }
        Payload::ActRequest(req) => {
            if phase != InEpisode {
                return Err(reject("a barrier is already open or no episode is live"));
            }
            next.phase = AwaitingActions;
            next.outstanding = req.roles.iter().cloned().collect();
        }
        Payload::ActSubmit(_) => {
            if phase != AwaitingActions {
                return Err(reject("no action was requested"));
            }
            let role = incoming.acting_role().unwrap_or_default();
            if !next.outstanding.remove(role) {
                return Err(reject(&format!("role `{role}` owes no action this tick")));
            }
            if next.outstanding.is_empty() {
                next.phase = InEpisode;
            }
        }
        Payload::StepBroadcast(_) => match phase {
            InEpisode | AwaitingActions => {
                next.phase = InEpisode;
                next.outstanding.clear();
            }
            _ => return Err(reject("no episode is live")),
        },
        Payload::EpisodeEnd(_) => {
            if phase != InEpisode {
                return Err(reject("no episode is live"));
            }
            next.phase = BetweenEpisodes;
        }
        Payload::PrefQuery(q) => {
            if phase == Lobby {
                return Err(reject("nobody has joined"));
            }
            if !next.open_queries.insert(q.query_id.clone()) {
                return Err(reject(&format!("query `{}` is already open", q.query_id)));
            }
        }
        Payload::PrefResponse(r) => {
            if !next.open_queries.remove(&r.query_id) {
                return Err(reject(&format!("query `{}` is not open", r.query_id)));
            }
        }
        Payload::SessionEnd(_) => {
            next.phase = Ended;
            next.outstanding.clear();
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Action;
    use crate::protocol::{
        ActRequest, ActSubmit, ControllerId, Heartbeat, Join, PrefResponse, Sender, SessionEnd, StartEpisode,
    };

    fn server(tick: Option<u64>, p: Payload) -> Envelope {
        Envelope::new("s", Sender::Server, tick, p, 0)
    }

    fn submit(role: &str) -> Envelope {
        Envelope::new(
            "s",
            Sender::Controller(ControllerId::human(role)),
            Some(0),
            Payload::ActSubmit(ActSubmit {
                action: Action::discrete(0),
                role: None,
                intention: None,
            }),
            0,
        )
    }

    fn awaiting(roles: &[&str]) -> ProtocolState {
        let frames = [
            server(None, Payload::Join(Join { token: "t".into(), role: None })),
            server(None, Payload::StartEpisode(StartEpisode { episode: 0 })),
            server(
                None,
                Payload::ActRequest(ActRequest {
                    tick: 0,
                    roles: roles.iter().map(|r| r.to_string()).collect(),
                    deadline_ms: 10,
                }),
            ),
        ];
        ProtocolState::replay(&frames).unwrap()
    }

    #[test]
    fn last_submission_returns_to_in_episode() {
        let s = awaiting(&["a", "b"]);
        assert_eq!(s.phase, Phase::AwaitingActions);
        let s = validate_transition(&s, &submit("a")).unwrap();
        assert_eq!(s.phase, Phase::AwaitingActions);
        let s = validate_transition(&s, &submit("b")).unwrap();
        assert_eq!(s.phase, Phase::InEpisode);
    }

    #[test]
    fn duplicate_or_foreign_submission_is_rejected() {
        let s = awaiting(&["a"]);
        assert!(validate_transition(&s, &submit("z")).is_err());
        let s2 = validate_transition(&s, &submit("a")).unwrap();
        assert!(matches!(
            validate_transition(&s2, &submit("a")),
            Err(ProtocolError::ProtocolViolation { phase: Phase::InEpisode, .. })
        ));
    }

    #[test]
    fn submit_in_lobby_is_a_violation() {
        assert!(validate_transition(&ProtocolState::lobby(), &submit("a")).is_err());
    }

    #[test]
    fn nothing_after_session_end() {
        let end = server(
            None,
            Payload::SessionEnd(SessionEnd {
                reason: "done".into(),
                completion_code: None,
                redirect: None,
            }),
        );
        let s = validate_transition(&awaiting(&["a"]), &end).unwrap();
        assert_eq!(s.phase, Phase::Ended);
        assert!(validate_transition(&s, &server(None, Payload::Heartbeat(Heartbeat {}))).is_err());
    }

    #[test]
    fn responses_need_an_open_query() {
        let r = server(
            None,
            Payload::PrefResponse(PrefResponse {
                query_id: "q".into(),
                ranking: vec![],
            }),
        );
        assert!(validate_transition(&awaiting(&["a"]), &r).is_err());
    }
}
