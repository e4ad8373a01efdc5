//! HTTP surface: participant sockets, the entry URL, the admin API and the
//! static UI bundle.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::Context;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{ConnectInfo, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use loopstage_core::config::{assign_condition, ExperimentDef};
use loopstage_core::orchestrator::{SessionDriver, SessionParams};
use loopstage_core::protocol::{decode_envelope, encode_envelope, Envelope, ErrorPayload, Payload, ProtocolError, Sender};
use loopstage_core::rng::{split_seed, CounterRng};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{mpsc, oneshot, Mutex};
use tower_http::services::ServeDir;

use crate::actor::{now_ms, Cmd, IssueError, Outgoing, SessionActor, SessionInfo};
use crate::config::ServerConfig;

/// Capacity of a session's command queue. Sockets wait when it is full.
const COMMAND_QUEUE: usize = 1024;

#[derive(Clone)]
struct SessionEntry {
    study_id: String,
    condition: Option<String>,
    tx: mpsc::Sender<Cmd>,
}

pub struct AppState {
    config: ServerConfig,
    studies: BTreeMap<String, ExperimentDef>,
    sessions: Mutex<HashMap<String, SessionEntry>>,
    /// Session creation order, so `/join` fills older sessions first.
    order: Mutex<Vec<String>>,
    rng: Mutex<CounterRng>,
    next_conn: AtomicU64,
}

impl AppState {
    pub fn new(config: ServerConfig, experiments: Vec<ExperimentDef>) -> anyhow::Result<Arc<Self>> {
        let mut studies = BTreeMap::new();
        for def in experiments {
            def.validate().with_context(|| format!("study `{}`", def.study_id))?;
            let id = def.study_id.clone();
            anyhow::ensure!(studies.insert(id.clone(), def).is_none(), "study `{id}` is configured twice");
        }
        std::fs::create_dir_all(&config.data_dir)
            .with_context(|| format!("creating data dir {}", config.data_dir.display()))?;
        let seed = config.seed.unwrap_or_else(|| now_ms() ^ u64::from(std::process::id()).rotate_left(32));
        Ok(Arc::new(Self {
            config,
            studies,
            sessions: Mutex::new(HashMap::new()),
            order: Mutex::new(Vec::new()),
            rng: Mutex::new(CounterRng::new(seed)),
            next_conn: AtomicU64::new(1),
        }))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    /// Starts a session task and returns its id.
    pub async fn create_session(
        &self,
        study_id: &str,
        condition: Option<String>,
        master_seed: Option<u64>,
    ) -> Result<String, ApiError> {
        let def = self
            .studies
            .get(study_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown study `{study_id}`")))?;
        let def = match &condition {
            Some(c) => def.for_condition(c).map_err(|e| ApiError::BadRequest(e.to_string()))?,
            None => def.clone(),
        };
        let (session_id, seed, token_seed) = {
            let mut rng = self.rng.lock().await;
            let tag = rng.next_u64();
            let id = format!("{}-{:012x}", sanitize(study_id), tag & 0xffff_ffff_ffff);
            (id, master_seed.unwrap_or_else(|| rng.next_u64()), rng.next_u64())
        };
        let path = self.config.data_dir.join(format!("{session_id}.jsonl"));
        let file = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| ApiError::Internal(format!("cannot create {}: {e}", path.display())))?;
        let params = SessionParams {
            session_id: session_id.clone(),
            def,
            condition: condition.clone(),
            master_seed: seed,
            verify_tokens: true,
        };
        let (driver, _) =
            SessionDriver::create(params, now_ms(), file).map_err(|e| ApiError::Internal(e.to_string()))?;
        let (tx, rx) = mpsc::channel(COMMAND_QUEUE);
        tokio::spawn(SessionActor::new(driver, path, split_seed(token_seed, &session_id)).run(rx));
        let entry = SessionEntry {
            study_id: study_id.to_string(),
            condition,
            tx,
        };
        self.sessions.lock().await.insert(session_id.clone(), entry);
        self.order.lock().await.push(session_id.clone());
        tracing::info!(session = %session_id, study = study_id, "session created");
        Ok(session_id)
    }

    async fn entry(&self, session_id: &str) -> Result<SessionEntry, ApiError> {
        self.sessions
            .lock()
            .await
            .get(session_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session `{session_id}`")))
    }

    pub async fn status(&self, session_id: &str) -> Result<SessionInfo, ApiError> {
        let entry = self.entry(session_id).await?;
        let (reply, rx) = oneshot::channel();
        entry.tx.send(Cmd::Status { reply }).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())
    }

    pub async fn end(&self, session_id: &str, reason: &str) -> Result<SessionInfo, ApiError> {
        let entry = self.entry(session_id).await?;
        let (reply, rx) = oneshot::channel();
        let cmd = Cmd::End {
            reason: reason.to_string(),
            reply,
        };
        entry.tx.send(cmd).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())
    }

    async fn issue(&self, entry: &SessionEntry, pid: &str) -> Result<String, IssueError> {
        let (reply, rx) = oneshot::channel();
        let cmd = Cmd::Issue {
            pid: pid.to_string(),
            reply,
        };
        if entry.tx.send(cmd).await.is_err() {
            return Err(IssueError::Ended);
        }
        rx.await.unwrap_or(Err(IssueError::Ended))
    }

    /// Finds (or creates) a session for `pid` and issues its join token.
    /// Without an explicit session the participant goes to the oldest open
    /// session of the study in their assigned condition.
    pub async fn join(&self, study: &str, pid: &str, session: Option<&str>) -> Result<(String, String), ApiError> {
        let def = self
            .studies
            .get(study)
            .ok_or_else(|| ApiError::NotFound(format!("unknown study `{study}`")))?;
        if let Some(id) = session {
            let entry = self.entry(id).await?;
            if entry.study_id != study {
                return Err(ApiError::BadRequest(format!("session `{id}` belongs to another study")));
            }
            return match self.issue(&entry, pid).await {
                Ok(token) => Ok((id.to_string(), token)),
                Err(IssueError::Full) => Err(ApiError::Conflict("session is full".into())),
                Err(IssueError::Ended) => Err(ApiError::Conflict("session has ended".into())),
            };
        }
        let condition = assign_condition(def, pid, self.config.assignment_seed);
        let candidates: Vec<(String, SessionEntry)> = {
            let order = self.order.lock().await;
            let sessions = self.sessions.lock().await;
            order
                .iter()
                .filter_map(|id| sessions.get(id).map(|e| (id.clone(), e.clone())))
                .filter(|(_, e)| e.study_id == study && e.condition == condition)
                .collect()
        };
        for (id, entry) in candidates {
            if let Ok(token) = self.issue(&entry, pid).await {
                return Ok((id, token));
            }
        }
        let id = self.create_session(study, condition, None).await?;
        let entry = self.entry(&id).await?;
        let token = self
            .issue(&entry, pid)
            .await
            .map_err(|_| ApiError::Internal("fresh session refused a participant".into()))?;
        Ok((id, token))
    }

    pub async fn session_ids(&self) -> Vec<String> {
        self.order.lock().await.clone()
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn gone() -> ApiError {
    ApiError::Internal("session task stopped".into())
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Unauthorized,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "admin credentials required".into()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": message }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/ws/{session_id}", get(ws_upgrade))
        .route("/join", get(join))
        .route("/admin/sessions", get(list_sessions).post(create_session))
        .route("/admin/sessions/{session_id}", get(session_status))
        .route("/admin/sessions/{session_id}/end", post(end_session))
        .route("/healthz", get(|| async { "ok" }));
    if let Some(dir) = &state.config.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    } else {
        app = app.route("/", get(placeholder_index));
    }
    app.with_state(state)
}

async fn placeholder_index() -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        include_str!("../static/index.html"),
    )
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(state.config.bind)
        .await
        .with_context(|| format!("binding {}", state.config.bind))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(listener, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> anyhow::Result<()> {
    axum::serve(listener, router(state).into_make_service_with_connect_info::<SocketAddr>()).await?;
    Ok(())
}

fn authorize(state: &AppState, headers: &HeaderMap, peer: SocketAddr) -> Result<(), ApiError> {
    match &state.config.admin_token {
        Some(token) => {
            let given = headers
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "));
            if given == Some(token.as_str()) {
                Ok(())
            } else {
                Err(ApiError::Unauthorized)
            }
        }
        None if peer.ip().is_loopback() => Ok(()),
        None => Err(ApiError::Unauthorized),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    study: String,
    #[serde(default)]
    condition: Option<String>,
    #[serde(default)]
    master_seed: Option<u64>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Json(req): Json<CreateRequest>,
) -> Result<impl IntoResponse, ApiError> {
    authorize(&state, &headers, peer)?;
    let id = state.create_session(&req.study, req.condition, req.master_seed).await?;
    let info = state.status(&id).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn list_sessions(
    State(state): State<Arc<AppState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    authorize(&state, &headers, peer)?;
    let mut out = Vec::new();
    for id in state.session_ids().await {
        out.push(state.status(&id).await?);
    }
    Ok(Json(out))
}

async fn session_status(
    State(state): State<Arc<AppState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Path(session_id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    authorize(&state, &headers, peer)?;
    Ok(Json(state.status(&session_id).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndRequest {
    #[serde(default)]
    reason: Option<String>,
}

async fn end_session(
    State(state): State<Arc<AppState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Path(session_id): Path<String>,
    body: Option<Json<EndRequest>>,
) -> Result<impl IntoResponse, ApiError> {
    authorize(&state, &headers, peer)?;
    let reason = body.and_then(|Json(b)| b.reason).unwrap_or_else(|| "admin".into());
    Ok(Json(state.end(&session_id, &reason).await?))
}

#[derive(Debug, Deserialize)]
struct JoinQuery {
    study: Option<String>,
    pid: Option<String>,
    session: Option<String>,
    /// `json` returns the assignment instead of redirecting to the UI.
    format: Option<String>,
}

async fn join(State(state): State<Arc<AppState>>, Query(q): Query<JoinQuery>) -> Result<Response, ApiError> {
    let study = q.study.filter(|s| !s.is_empty()).ok_or_else(|| ApiError::BadRequest("missing study".into()))?;
    let pid = q.pid.filter(|s| !s.is_empty()).ok_or_else(|| ApiError::BadRequest("missing pid".into()))?;
    let (session_id, token) = state.join(&study, &pid, q.session.as_deref()).await?;
    if q.format.as_deref() == Some("json") {
        return Ok(Json(json!({ "session_id": session_id, "token": token, "ws": format!("/ws/{session_id}") })).into_response());
    }
    let location = format!("/?session={}&token={}", encode_component(&session_id), encode_component(&token));
    Ok(Redirect::to(&location).into_response())
}

/// Percent-encodes everything outside the URL-safe unreserved set.
fn encode_component(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

async fn ws_upgrade(
    State(state): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let entry = state.entry(&session_id).await?;
    let conn = state.next_conn.fetch_add(1, Ordering::Relaxed);
    Ok(ws.on_upgrade(move |socket| connection(socket, session_id, entry.tx, conn)))
}

fn protocol_error_code(e: &ProtocolError) -> &'static str {
    match e {
        ProtocolError::MalformedFrame(_) => "MalformedFrame",
        ProtocolError::UnknownKind(_) => "UnknownKind",
        ProtocolError::SchemaViolation { .. } | ProtocolError::InvalidEnvelope(_) => "SchemaViolation",
        ProtocolError::VersionMismatch { .. } => "VersionMismatch",
        ProtocolError::ProtocolViolation { .. } => "ProtocolViolation",
    }
}

fn server_frame(session_id: &str, payload: Payload) -> Outgoing {
    let env = Envelope::new(session_id, Sender::Server, None, payload, now_ms());
    let bytes = encode_envelope(&env).expect("server frames are valid");
    Outgoing::Text(String::from_utf8(bytes).expect("canonical JSON is UTF-8"))
}

/// Pumps one socket. Undecodable frames and heartbeats are answered here and
/// never reach the session.
async fn connection(socket: WebSocket, session_id: String, session: mpsc::Sender<Cmd>, conn: u64) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Outgoing>();
    if session.send(Cmd::Connect { conn, tx: tx.clone() }).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outgoing::Text(t) => {
                    if sink.send(Message::Text(t.into())).await.is_err() {
                        break;
                    }
                }
                Outgoing::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(msg) = stream.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(b)) => match String::from_utf8(b.to_vec()) {
                Ok(s) => s.into(),
                Err(_) => {
                    let _ = tx.send(server_frame(
                        &session_id,
                        Payload::Error(ErrorPayload {
                            code: "MalformedFrame".into(),
                            message: "frames must be UTF-8 JSON".into(),
                        }),
                    ));
                    continue;
                }
            },
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        match decode_envelope(text.as_bytes()) {
            Ok(env) if env.session_id != session_id => {
                let _ = tx.send(server_frame(
                    &session_id,
                    Payload::Error(ErrorPayload {
                        code: "ProtocolViolation".into(),
                        message: format!("frame is for session `{}`", env.session_id),
                    }),
                ));
            }
            Ok(env) if matches!(env.payload, Payload::Heartbeat(_)) => {
                let _ = tx.send(server_frame(&session_id, Payload::Heartbeat(Default::default())));
            }
            Ok(envelope) => {
                if session.send(Cmd::Frame { conn, envelope }).await.is_err() {
                    break;
                }
            }
            Err(e) => {
                let _ = tx.send(server_frame(
                    &session_id,
                    Payload::Error(ErrorPayload {
                        code: protocol_error_code(&e).into(),
                        message: e.to_string(),
                    }),
                ));
            }
        }
    }
    let _ = session.send(Cmd::Closed { conn }).await;
    drop(tx);
    let _ = writer.await;
}
