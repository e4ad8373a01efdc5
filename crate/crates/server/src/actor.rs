//! One tokio task per session. It owns the [`SessionDriver`], so session
//! state is never shared; sockets and HTTP handlers talk to it by message.

use std::collections::HashMap;
use std::fs::File;
use std::path::PathBuf;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use loopstage_core::config::{mint_completion_code, mint_join_token};
use loopstage_core::orchestrator::{Binding, Delivery, SessionDriver, SessionStatus, Target};
use loopstage_core::protocol::{encode_envelope, ControllerId, Envelope, ErrorPayload, Payload, Sender, SessionEnd};
use loopstage_core::rng::CounterRng;
use serde::Serialize;
use tokio::sync::{mpsc, oneshot};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

/// What the writer half of a socket should do next.
#[derive(Debug)]
pub enum Outgoing {
    Text(String),
    Close,
}

pub enum Cmd {
    Connect {
        conn: u64,
        tx: mpsc::UnboundedSender<Outgoing>,
    },
    Frame {
        conn: u64,
        envelope: Envelope,
    },
    Closed {
        conn: u64,
    },
    /// Hands a participant a join token, reusing the one already issued to
    /// the same participant id.
    Issue {
        pid: String,
        reply: oneshot::Sender<Result<String, IssueError>>,
    },
    Status {
        reply: oneshot::Sender<SessionInfo>,
    },
    End {
        reason: String,
        reply: oneshot::Sender<SessionInfo>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueError {
    Full,
    Ended,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    #[serde(flatten)]
    pub status: SessionStatus,
    pub log_path: PathBuf,
    pub halted: bool,
    /// Vacant human seats not yet promised to an issued token.
    pub open_seats: usize,
    pub connections: usize,
}

struct Conn {
    tx: mpsc::UnboundedSender<Outgoing>,
    role: Option<String>,
}

pub struct SessionActor {
    driver: SessionDriver<File>,
    log_path: PathBuf,
    study_id: String,
    secret: String,
    redirect_template: String,
    rng: CounterRng,
    conns: HashMap<u64, Conn>,
    role_conn: HashMap<String, u64>,
    /// Participant ids live only in memory; logs never see them.
    token_pid: HashMap<String, String>,
    pid_token: HashMap<String, String>,
    role_pid: HashMap<String, String>,
    /// Reason of the SessionEnd broadcast, for participants who rejoin late.
    end_reason: Option<String>,
    closed: bool,
}

impl SessionActor {
    pub fn new(driver: SessionDriver<File>, log_path: PathBuf, token_seed: u64) -> Self {
        let def = driver.session().def();
        Self {
            study_id: def.study_id.clone(),
            secret: def.recruitment.completion_secret.clone(),
            redirect_template: def.recruitment.redirect_template.clone(),
            driver,
            log_path,
            rng: CounterRng::new(token_seed),
            conns: HashMap::new(),
            role_conn: HashMap::new(),
            token_pid: HashMap::new(),
            pid_token: HashMap::new(),
            role_pid: HashMap::new(),
            end_reason: None,
            closed: false,
        }
    }

    pub async fn run(mut self, mut rx: mpsc::Receiver<Cmd>) {
        loop {
            let deadline = self.driver.session().next_deadline().filter(|_| !self.driver.is_halted());
            let sleep = deadline.map(|d| Duration::from_millis(d.saturating_sub(now_ms())));
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    Some(cmd) => self.handle(cmd),
                    None => break,
                },
                () = tokio::time::sleep(sleep.unwrap_or_default()), if sleep.is_some() => {
                    // A timer that wakes a hair early still fires at its deadline.
                    let now = now_ms().max(deadline.unwrap_or_default());
                    let out = self.driver.on_timer(now);
                    self.route(out, None);
                }
            }
        }
    }

    fn handle(&mut self, cmd: Cmd) {
        match cmd {
            Cmd::Connect { conn, tx } => {
                self.conns.insert(conn, Conn { tx, role: None });
            }
            Cmd::Frame { conn, envelope } => self.on_frame(conn, envelope),
            Cmd::Closed { conn } => {
                let Some(c) = self.conns.remove(&conn) else { return };
                let Some(role) = c.role else { return };
                if self.role_conn.get(&role) == Some(&conn) {
                    self.role_conn.remove(&role);
                    if !self.driver.session().is_ended() {
                        let out = self.driver.disconnect(&role, now_ms());
                        self.route(out, None);
                    }
                }
            }
            Cmd::Issue { pid, reply } => {
                let _ = reply.send(self.issue(pid));
            }
            Cmd::Status { reply } => {
                let _ = reply.send(self.info());
            }
            Cmd::End { reason, reply } => {
                if !self.driver.session().is_ended() {
                    let out = self.driver.admin_end(&reason, now_ms());
                    self.route(out, None);
                }
                let _ = reply.send(self.info());
            }
        }
    }

    fn info(&self) -> SessionInfo {
        SessionInfo {
            status: self.driver.session().status(),
            log_path: self.log_path.clone(),
            halted: self.driver.is_halted(),
            open_seats: self.open_seats(),
            connections: self.conns.len(),
        }
    }

    fn open_seats(&self) -> usize {
        if self.driver.session().is_ended() {
            return 0;
        }
        let vacant = self
            .driver
            .session()
            .status()
            .bindings
            .values()
            .filter(|b| matches!(b, Binding::Vacant))
            .count();
        let bound: Vec<&String> = self.role_pid.values().collect();
        let promised = self.pid_token.keys().filter(|pid| !bound.contains(pid)).count();
        vacant.saturating_sub(promised)
    }

    /// A participant who already holds a token keeps it after the session
    /// ends, so a late rejoin can still collect the completion code.
    fn issue(&mut self, pid: String) -> Result<String, IssueError> {
        if let Some(token) = self.pid_token.get(&pid) {
            return Ok(token.clone());
        }
        if self.driver.session().is_ended() {
            return Err(IssueError::Ended);
        }
        if self.open_seats() == 0 {
            return Err(IssueError::Full);
        }
        let token = mint_join_token(&self.secret, self.driver.session().id(), &mut self.rng);
        self.token_pid.insert(token.clone(), pid.clone());
        self.pid_token.insert(pid, token.clone());
        Ok(token)
    }

    fn send_to(&self, conn: u64, envelope: &Envelope) {
        let Some(c) = self.conns.get(&conn) else { return };
        match encode_envelope(envelope) {
            Ok(bytes) => {
                let _ = c.tx.send(Outgoing::Text(String::from_utf8(bytes).expect("canonical JSON is UTF-8")));
            }
            Err(e) => tracing::error!(error = %e, kind = %envelope.kind(), "dropping unencodable envelope"),
        }
    }

    fn reject(&self, conn: u64, code: &str, message: &str) {
        let env = Envelope::new(
            self.driver.session().id(),
            Sender::Server,
            None,
            Payload::Error(ErrorPayload {
                code: code.into(),
                message: message.into(),
            }),
            now_ms(),
        );
        self.send_to(conn, &env);
    }

    fn on_frame(&mut self, conn: u64, envelope: Envelope) {
        let Some(c) = self.conns.get(&conn) else { return };
        let join = matches!(envelope.payload, Payload::Join(_));
        match (&c.role, join) {
            (None, false) => return self.reject(conn, "ProtocolViolation", "send Join first"),
            (Some(role), _) => {
                let own = Sender::Controller(ControllerId::human(role));
                if envelope.sender != own && !join {
                    return self.reject(conn, "ProtocolViolation", &format!("this connection speaks for `{role}`"));
                }
            }
            (None, true) => {}
        }
        let token = match &envelope.payload {
            Payload::Join(j) => Some(j.token.clone()),
            _ => None,
        };
        if let (true, Some(pid)) = (self.driver.session().is_ended(), token.as_ref().and_then(|t| self.token_pid.get(t))) {
            return self.late_end(conn, pid.clone());
        }
        let (out, _) = self.driver.handle_input(envelope, now_ms());
        if let Some(token) = token {
            self.bind_from(conn, &token, &out);
        }
        self.route(out, Some(conn));
    }

    /// Binds `conn` to the role named in a JoinAck addressed to it.
    fn bind_from(&mut self, conn: u64, token: &str, out: &[Delivery]) {
        let role = out.iter().find_map(|d| match (&d.target, &d.envelope.payload) {
            (Target::Caller, Payload::JoinAck(ack)) => Some(ack.role.clone()),
            _ => None,
        });
        let Some(role) = role else { return };
        if let Some(old) = self.role_conn.insert(role.clone(), conn).filter(|&old| old != conn) {
            if let Some(c) = self.conns.get_mut(&old) {
                c.role = None;
                let _ = c.tx.send(Outgoing::Close);
            }
        }
        if let Some(c) = self.conns.get_mut(&conn) {
            c.role = Some(role.clone());
        }
        if let Some(pid) = self.token_pid.get(token) {
            self.role_pid.insert(role, pid.clone());
        }
    }

    /// Answers a rejoin after the end with the participant's SessionEnd. It
    /// is a transport reply, so it is not logged.
    fn late_end(&mut self, conn: u64, pid: String) {
        let mut end = SessionEnd {
            reason: self.end_reason.clone().unwrap_or_else(|| "completed".into()),
            completion_code: None,
            redirect: None,
        };
        self.fill_code(&pid, &mut end);
        let env = Envelope::new(self.driver.session().id(), Sender::Server, None, Payload::SessionEnd(end), now_ms());
        self.send_to(conn, &env);
        if let Some(c) = self.conns.get(&conn) {
            let _ = c.tx.send(Outgoing::Close);
        }
    }

    fn fill_code(&self, pid: &str, end: &mut SessionEnd) {
        let code = mint_completion_code(&self.study_id, pid, &self.secret);
        end.redirect = Some(self.redirect_template.replace("{CODE}", &code));
        end.completion_code = Some(code);
    }

    /// Fills in the per-participant completion code and redirect.
    fn personalize(&self, role: &str, envelope: &mut Envelope) {
        let Some(pid) = self.role_pid.get(role) else { return };
        let fill = |end: &mut SessionEnd| self.fill_code(pid, end);
        match &mut envelope.payload {
            Payload::SessionEnd(end) => fill(end),
            Payload::JoinAck(ack) => {
                if let Some(snap) = ack.snapshot.as_mut() {
                    for queued in &mut snap.undelivered {
                        if let Payload::SessionEnd(end) = &mut queued.payload {
                            fill(end);
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn route(&mut self, out: Vec<Delivery>, caller: Option<u64>) {
        for d in out {
            if let Payload::SessionEnd(end) = &d.envelope.payload {
                self.end_reason.get_or_insert_with(|| end.reason.clone());
            }
            match d.target {
                Target::Caller => {
                    let Some(conn) = caller else { continue };
                    let mut env = d.envelope;
                    if let Some(role) = self.conns.get(&conn).and_then(|c| c.role.clone()) {
                        self.personalize(&role, &mut env);
                    }
                    self.send_to(conn, &env);
                }
                Target::Roles(roles) => {
                    for role in roles {
                        let Some(&conn) = self.role_conn.get(&role) else { continue };
                        let mut env = d.envelope.clone();
                        self.personalize(&role, &mut env);
                        self.send_to(conn, &env);
                    }
                }
            }
        }
        if self.driver.session().is_ended() && !self.closed {
            self.closed = true;
            for c in self.conns.values() {
                let _ = c.tx.send(Outgoing::Close);
            }
        }
    }
}
