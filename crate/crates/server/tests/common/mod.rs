//! Shared harness for the socket-level tests: an in-process server on an
//! ephemeral port, a WebSocket client, and a scripted participant.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use loopstage_core::config::{fixtures, parse_experiment, ExperimentDef};
use loopstage_core::env::Action;
use loopstage_core::protocol::{
    decode_envelope, encode_envelope, ActSubmit, ControllerId, DelegationGrant, DelegationRevoke, Envelope, Join,
    Payload, PrefResponse, RewardAnnotation, Sender, SessionEnd,
};
use loopstage_core::rng::CounterRng;
use loopstage_server::{AppState, ServerConfig};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub const SECRET: &str = "change-me";
const RECV_TIMEOUT: Duration = Duration::from_secs(20);

/// The four bundled studies, sped up so a whole session takes well under a
/// second of wall time.
pub fn fast_fixtures() -> Vec<ExperimentDef> {
    let pace = |text: &str, extra: &[(&str, Value)]| {
        let mut ov = vec![("episodes", json!(2)), ("inter_episode_pause_ms", json!(5))];
        ov.extend(extra.iter().cloned());
        parse_experiment(text).unwrap().with_overrides(ov).unwrap()
    };
    vec![
        pace(
            fixtures::TEAMING,
            &[("env.params.k", json!(4)), ("roles.0.action_deadline_ms", json!(400))],
        ),
        pace(
            fixtures::DELEGATION,
            &[("episodes", json!(1)), ("tick_interval_ms", json!(1)), ("roles.0.action_deadline_ms", json!(400))],
        ),
        pace(fixtures::REWARD_ANNOTATION, &[("tick_interval_ms", json!(2))]),
        pace(
            fixtures::UTILITY_ELICITATION,
            &[("tick_interval_ms", json!(2)), ("agents.presenter.params.max_items", json!(4))],
        ),
    ]
}

pub struct TestServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    pub dir: tempfile::TempDir,
}

impl TestServer {
    pub async fn start(defs: Vec<ExperimentDef>, admin_token: Option<&str>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = ServerConfig {
            data_dir: dir.path().join("logs"),
            admin_token: admin_token.map(str::to_string),
            seed: Some(7),
            ..ServerConfig::default()
        };
        let state = AppState::new(config, defs).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(loopstage_server::serve_on(listener, state.clone()));
        Self { addr, state, dir }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn http() -> reqwest::Client {
        reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .unwrap()
    }

    /// `(session_id, token)` from `/join?format=json`.
    pub async fn join(&self, study: &str, pid: &str, session: Option<&str>) -> (String, String) {
        let mut url = format!("{}?study={study}&pid={pid}&format=json", self.url("/join"));
        if let Some(s) = session {
            url.push_str(&format!("&session={s}"));
        }
        let resp = Self::http().get(url).send().await.unwrap();
        assert!(resp.status().is_success(), "join failed: {}", resp.status());
        let body: Value = resp.json().await.unwrap();
        (
            body["session_id"].as_str().unwrap().to_string(),
            body["token"].as_str().unwrap().to_string(),
        )
    }

    pub async fn connect(&self, session_id: &str) -> Client {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws/{session_id}", self.addr))
            .await
            .unwrap();
        Client {
            ws,
            session_id: session_id.to_string(),
        }
    }
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    pub session_id: String,
}

impl Client {
    pub async fn send(&mut self, role: &str, tick: Option<u64>, payload: Payload) {
        let env = Envelope::new(
            &self.session_id,
            Sender::Controller(ControllerId::human(role)),
            tick,
            payload,
            loopstage_server_now(),
        );
        self.send_raw(String::from_utf8(encode_envelope(&env).unwrap()).unwrap()).await;
    }

    pub async fn send_raw(&mut self, text: String) {
        self.ws.send(Message::Text(text.into())).await.unwrap();
    }

    /// Next server frame, or `None` once the server closes the socket.
    pub async fn recv(&mut self) -> Option<Envelope> {
        loop {
            let msg = tokio::time::timeout(RECV_TIMEOUT, self.ws.next())
                .await
                .expect("server went quiet")?;
            match msg {
                Ok(Message::Text(t)) => return Some(decode_envelope(t.as_bytes()).expect("server frames decode")),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => continue,
            }
        }
    }

    /// Reads until a frame matches, returning it.
    pub async fn until(&mut self, mut pred: impl FnMut(&Envelope) -> bool) -> Envelope {
        loop {
            let env = self.recv().await.expect("socket closed while waiting");
            if pred(&env) {
                return env;
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

fn loopstage_server_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap()
        .as_millis() as u64
}

/// Discrete action arity of each role a scripted participant may act for.
pub fn arity(role: &str) -> u32 {
    match role {
        "navigator" => 5,
        "learner" => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone)]
pub struct Script {
    pub study: String,
    pub pid: String,
    /// Drops the socket after this many frames and resumes with the same
    /// participant id.
    pub reconnect_after: Option<usize>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct Outcome {
    pub session_id: String,
    pub role: String,
    pub end: SessionEnd,
    pub frames: usize,
    pub resumed: bool,
    pub errors: Vec<String>,
}

/// Plays one participant to the end of its session: answers every action
/// request, ranks every query, annotates steps and grants delegation.
pub async fn drive(server: &TestServer, script: Script) -> Outcome {
    let mut rng = CounterRng::new(script.seed);
    let (session_id, token) = server.join(&script.study, &script.pid, None).await;
    let mut client = server.connect(&session_id).await;
    client
        .send("", None, Payload::Join(Join { token: token.clone(), role: None }))
        .await;
    let mut role = String::new();
    let mut frames = 0usize;
    let mut resumed = false;
    let mut errors = Vec::new();
    let mut delegated: Option<(String, u32)> = None;
    let mut pending: Vec<Envelope> = Vec::new();
    loop {
        let env = match pending.pop() {
            Some(e) => e,
            None => match client.recv().await {
                Some(e) => e,
                None => panic!("{session_id}: socket closed before SessionEnd"),
            },
        };
        frames += 1;
        match env.payload {
            Payload::JoinAck(ack) => {
                role = ack.role;
                if let Some(snap) = ack.snapshot {
                    pending.extend(snap.undelivered.into_iter().rev());
                }
            }
            Payload::ActRequest(req) => {
                for r in &req.roles {
                    let action = Action::discrete(rng.below(u64::from(arity(r))) as u32);
                    let payload = Payload::ActSubmit(ActSubmit {
                        action,
                        role: (r != &role).then(|| r.clone()),
                        intention: None,
                    });
                    client.send(&role, Some(req.tick), payload).await;
                    if let Some((_, n)) = delegated.as_mut().filter(|(d, _)| d == r) {
                        *n += 1;
                    }
                }
                if let Some((d, n)) = delegated.clone() {
                    if n >= 8 {
                        let payload = Payload::DelegationRevoke(DelegationRevoke {
                            role: d,
                            effective_tick: None,
                        });
                        client.send(&role, None, payload).await;
                        delegated = None;
                    }
                }
            }
            Payload::StepBroadcast(_) if role == "annotator" => {
                if rng.below(2) == 0 {
                    let value = if rng.below(2) == 0 { 1 } else { -1 };
                    client
                        .send(&role, env.tick, Payload::RewardAnnotation(RewardAnnotation { value }))
                        .await;
                }
            }
            Payload::DelegationRequest(req) if req.target_role == role && delegated.is_none() => {
                let payload = Payload::DelegationGrant(DelegationGrant {
                    role: req.role.clone(),
                    target_role: role.clone(),
                    effective_tick: None,
                });
                client.send(&role, env.tick, payload).await;
                delegated = Some((req.role, 0));
            }
            Payload::PrefQuery(q) if q.target_role == role => {
                let mut ranking: Vec<String> = q.items.iter().map(|i| i.id.clone()).collect();
                rng.shuffle(&mut ranking);
                let payload = Payload::PrefResponse(PrefResponse {
                    query_id: q.query_id,
                    ranking,
                });
                client.send(&role, None, payload).await;
            }
            Payload::Error(e) => errors.push(format!("{}: {}", e.code, e.message)),
            Payload::SessionEnd(end) => {
                client.close().await;
                return Outcome {
                    session_id,
                    role,
                    end,
                    frames,
                    resumed,
                    errors,
                };
            }
            _ => {}
        }
        if script.reconnect_after == Some(frames) && !resumed {
            client.close().await;
            let (again, same) = server.join(&script.study, &script.pid, Some(&session_id)).await;
            assert_eq!((again.as_str(), same.as_str()), (session_id.as_str(), token.as_str()));
            client = server.connect(&session_id).await;
            client
                .send(&role, None, Payload::Join(Join { token: token.clone(), role: Some(role.clone()) }))
                .await;
            resumed = true;
        }
    }
}

/// Replays the session's log and returns the number of agreeing hashes.
pub fn replay_session(server: &TestServer, session_id: &str) -> Result<usize, String> {
    let path = server.dir.path().join("logs").join(format!("{session_id}.jsonl"));
    let file = loopstage_core::store::read_log(&path)
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
    let report = loopstage_core::store::replay(&file).map_err(|e| e.to_string())?;
    if report.truncated {
        return Err("log ends mid-group".into());
    }
    Ok(report.hashes.len())
}
