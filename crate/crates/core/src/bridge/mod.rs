//! Out-of-process environments. A remote speaks newline-delimited canonical
//! JSON frames over its stdio (or a TCP socket); [`BridgeHandle`] adapts it
//! to the [`Environment`] contract.
//!
//! Pipelining depth is 1: every request waits for its response, and a
//! response carrying any other id kills the handle.

mod conformance;
pub mod sabotage;
mod serve;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::env::{Action, EnvCapabilities, EnvError, Environment, Observation, RenderFrame, StepOutcome};
use crate::hash::canonical_of;

pub use conformance::{conformance_suite, CheckResult, ConformanceReport};
pub use serve::{serve, serve_tcp};

pub const BRIDGE_PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum Request {
    Hello { protocol_version: u32 },
    Reset { seed: u64 },
    Step {
        joint_action: Vec<Action>,
        /// Declared targets per controller, for environments advertising
        /// `intentions`; applied before the step.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        intentions: Vec<Option<u32>>,
    },
    Render,
    /// Asks the remote to exit. Not answered.
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum Response {
    HelloAck {
        env_id: String,
        capabilities: EnvCapabilities,
        /// API deviations beyond vector rewards and joint actions. Any entry
        /// is refused.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        extensions: Vec<String>,
    },
    ResetResult {
        observations: Vec<Observation>,
        /// The remote's canonical state, used for state hashing. Optional.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot: Option<Value>,
    },
    StepResult {
        outcome: StepOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot: Option<Value>,
    },
    RenderResult {
        frame: RenderFrame,
    },
    EnvError(RemoteError),
}

/// An environment-level failure relayed from the remote. `code` maps back to
/// the matching [`EnvError`] variant so bridged and native errors agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<usize>,
}

impl RemoteError {
    pub fn from_env(e: &EnvError) -> Self {
        let (code, controller, message) = match e {
            EnvError::SpaceViolation { controller, reason } => ("space_violation", Some(*controller), reason.clone()),
            EnvError::SteppedAfterEnd => ("stepped_after_end", None, e.to_string()),
            EnvError::NotReset => ("not_reset", None, e.to_string()),
            EnvError::Unsupported(_) => ("unsupported", None, e.to_string()),
            EnvError::Config(m) => ("config", None, m.clone()),
            EnvError::Bridge(m) => ("remote", None, m.clone()),
        };
        Self {
            code: code.into(),
            message,
            controller,
        }
    }

    pub fn to_env(&self) -> EnvError {
        match self.code.as_str() {
            "space_violation" => EnvError::SpaceViolation {
                controller: self.controller.unwrap_or(0),
                reason: self.message.clone(),
            },
            "stepped_after_end" => EnvError::SteppedAfterEnd,
            "not_reset" => EnvError::NotReset,
            "config" => EnvError::Config(self.message.clone()),
            _ => EnvError::Bridge(format!("remote error ({}): {}", self.code, self.message)),
        }
    }
}

/// One line on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame<T> {
    pub protocol_version: u32,
    pub id: u64,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Frame<T> {
    pub fn new(id: u64, body: T) -> Self {
        Self {
            protocol_version: BRIDGE_PROTOCOL_VERSION,
            id,
            body,
        }
    }

    /// Canonical JSON plus the terminating newline.
    pub fn to_line(&self) -> String {
        let mut s = canonical_of(self);
        s.push('\n');
        s
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("no HelloAck within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("remote capabilities rejected: {0}")]
    CapabilityInvalid(String),
    #[error("{op} got no response within {timeout:?}")]
    BridgeTimeout { op: &'static str, timeout: Duration },
    #[error("protocol desync: {0}")]
    ProtocolDesync(String),
    #[error("bridge is dead")]
    Dead,
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl From<BridgeError> for EnvError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Env(inner) => inner,
            other => EnvError::Bridge(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeState {
    Handshaking,
    Ready,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeOptions {
    pub handshake_timeout: Duration,
    pub call_timeout: Duration,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            call_timeout: DEFAULT_CALL_TIMEOUT,
        }
    }
}

struct Link {
    writer: Box<dyn Write + Send>,
    lines: Receiver<Result<String, String>>,
    state: BridgeState,
    next_id: u64,
    last_seen: Instant,
    snapshot: Value,
    episodes: u64,
    steps: u64,
    intentions: Vec<Option<u32>>,
}

/// Client side of one bridged environment. Dead is terminal: every call on
/// a dead handle fails without touching the transport.
pub struct BridgeHandle {
    env_id: String,
    caps: EnvCapabilities,
    options: BridgeOptions,
    link: Mutex<Link>,
    child: Option<Child>,
}

impl BridgeHandle {
    /// Launches `command` through the shell and handshakes over its stdio.
    pub fn spawn(command: &str, options: BridgeOptions) -> Result<Self, BridgeError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::Transport(format!("cannot launch `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect(stdout, stdin, options) {
            Ok(mut h) => {
                h.child = Some(child);
                Ok(h)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn connect_tcp(addr: impl ToSocketAddrs, options: BridgeOptions) -> Result<Self, BridgeError> {
        let stream = TcpStream::connect(addr).map_err(|e| BridgeError::Transport(e.to_string()))?;
        stream.set_nodelay(true).map_err(|e| BridgeError::Transport(e.to_string()))?;
        let reader = stream.try_clone().map_err(|e| BridgeError::Transport(e.to_string()))?;
        Self::connect(reader, stream, options)
    }

    /// Handshakes over an arbitrary byte stream pair. A reader thread turns
    /// incoming bytes into lines so every call can wait with a deadline.
    pub fn connect(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        options: BridgeOptions,
    ) -> Result<Self, BridgeError> {
        let (tx, rx) = mpsc::channel();
        std::thread::Builder::new()
            .name("bridge-reader".into())
            .spawn(move || {
                let mut reader = BufReader::new(reader);
                loop {
                    let mut line = String::new();
                    let msg = match reader.read_line(&mut line) {
                        Ok(0) => Err("remote closed its output".to_string()),
                        Ok(_) => Ok(line),
                        Err(e) => Err(e.to_string()),
                    };
                    let stop = msg.is_err();
                    if tx.send(msg).is_err() || stop {
                        break;
                    }
                }
            })
            .map_err(|e| BridgeError::Transport(e.to_string()))?;
        let mut link = Link {
            writer: Box::new(writer),
            lines: rx,
            state: BridgeState::Handshaking,
            next_id: 0,
            last_seen: Instant::now(),
            snapshot: Value::Null,
            episodes: 0,
            steps: 0,
            intentions: Vec::new(),
        };
        let hello = Request::Hello {
            protocol_version: BRIDGE_PROTOCOL_VERSION,
        };
        let ack = link.exchange(hello, options.handshake_timeout).map_err(|e| match e {
            BridgeError::BridgeTimeout { timeout, .. } => BridgeError::HandshakeTimeout(timeout),
            other => other,
        })?;
        let Response::HelloAck {
            env_id,
            capabilities,
            extensions,
        } = ack
        else {
            return Err(BridgeError::ProtocolDesync(format!("expected HelloAck, got {}", response_name(&ack))));
        };
        if !extensions.is_empty() {
            return Err(BridgeError::CapabilityInvalid(format!(
                "unsupported API extensions: {}",
                extensions.join(", ")
            )));
        }
        capabilities.validate().map_err(BridgeError::CapabilityInvalid)?;
        link.state = BridgeState::Ready;
        Ok(Self {
            env_id,
            caps: capabilities,
            options,
            link: Mutex::new(link),
            child: None,
        })
    }

    /// Serves `env` on a background thread and connects to it through
    /// in-memory pipes.
    pub fn loopback(env: Box<dyn Environment>, options: BridgeOptions) -> Result<Self, BridgeError> {
        let (client_read, server_write) = std::io::pipe().map_err(|e| BridgeError::Transport(e.to_string()))?;
        let (server_read, client_write) = std::io::pipe().map_err(|e| BridgeError::Transport(e.to_string()))?;
        std::thread::Builder::new()
            .name("bridge-loopback".into())
            .spawn(move || {
                if let Err(e) = serve(env, BufReader::new(server_read), server_write) {
                    tracing::debug!(error = %e, "loopback remote stopped");
                }
            })
            .map_err(|e| BridgeError::Transport(e.to_string()))?;
        Self::connect(client_read, client_write, options)
    }

    pub fn state(&self) -> BridgeState {
        self.lock().state
    }

    /// When the remote last answered.
    pub fn last_seen(&self) -> Instant {
        self.lock().last_seen
    }

    /// Marks the handle dead, e.g. when an external liveness timer fires.
    pub fn kill(&self) {
        self.lock().state = BridgeState::Dead;
    }

    pub fn rpc_reset(&mut self, seed: u64) -> Result<Vec<Observation>, BridgeError> {
        let timeout = self.options.call_timeout;
        let link = self.link.get_mut().unwrap_or_else(|p| p.into_inner());
        match link.call("reset", Request::Reset { seed }, timeout)? {
            Response::ResetResult { observations, snapshot } => {
                link.episodes += 1;
                link.steps = 0;
                link.snapshot = snapshot.unwrap_or(Value::Null);
                Ok(observations)
            }
            other => Err(link.desync("ResetResult", &other)),
        }
    }

    pub fn rpc_step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, BridgeError> {
        let timeout = self.options.call_timeout;
        let link = self.link.get_mut().unwrap_or_else(|p| p.into_inner());
        let req = Request::Step {
            joint_action: joint_action.to_vec(),
            intentions: std::mem::take(&mut link.intentions),
        };
        match link.call("step", req, timeout)? {
            Response::StepResult { outcome, snapshot } => {
                link.steps += 1;
                link.snapshot = snapshot.unwrap_or(Value::Null);
                Ok(outcome)
            }
            other => Err(link.desync("StepResult", &other)),
        }
    }

    pub fn rpc_render(&self) -> Result<RenderFrame, BridgeError> {
        let mut link = self.lock();
        match link.call("render", Request::Render, self.options.call_timeout)? {
            Response::RenderResult { frame } => Ok(frame),
            other => Err(link.desync("RenderResult", &other)),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Link> {
        self.link.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn response_name(r: &Response) -> &'static str {
    match r {
        Response::HelloAck { .. } => "HelloAck",
        Response::ResetResult { .. } => "ResetResult",
        Response::StepResult { .. } => "StepResult",
        Response::RenderResult { .. } => "RenderResult",
        Response::EnvError(_) => "EnvError",
    }
}

impl Link {
    fn desync(&mut self, expected: &str, got: &Response) -> BridgeError {
        self.state = BridgeState::Dead;
        BridgeError::ProtocolDesync(format!("expected {expected}, got {}", response_name(got)))
    }

    /// Sends one request and waits for its response. Remote env errors
    /// keep the handle alive; anything else that goes wrong kills it.
    fn call(&mut self, op: &'static str, req: Request, timeout: Duration) -> Result<Response, BridgeError> {
        if self.state != BridgeState::Ready {
            return Err(BridgeError::Dead);
        }
        match self.exchange(req, timeout) {
            Ok(Response::EnvError(e)) => Err(BridgeError::Env(e.to_env())),
            Ok(r) => Ok(r),
            Err(BridgeError::BridgeTimeout { timeout, .. }) => {
                self.state = BridgeState::Dead;
                Err(BridgeError::BridgeTimeout { op, timeout })
            }
            Err(e) => {
                self.state = BridgeState::Dead;
                Err(e)
            }
        }
    }

    fn exchange(&mut self, req: Request, timeout: Duration) -> Result<Response, BridgeError> {
        let id = self.next_id;
        self.next_id += 1;
        let line = Frame::new(id, req).to_line();
        self.writer
            .write_all(line.as_bytes())
            .and_then(|()| self.writer.flush())
            .map_err(|e| BridgeError::Transport(e.to_string()))?;
        let deadline = Instant::now() + timeout;
        let raw = match self.lines.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(BridgeError::Transport(e)),
            Err(RecvTimeoutError::Timeout) => return Err(BridgeError::BridgeTimeout { op: "call", timeout }),
            Err(RecvTimeoutError::Disconnected) => return Err(BridgeError::Transport("reader stopped".into())),
        };
        self.last_seen = Instant::now();
        let frame: Frame<Response> = serde_json::from_str(raw.trim_end())
            .map_err(|e| BridgeError::ProtocolDesync(format!("unparseable response: {e}")))?;
        if frame.protocol_version != BRIDGE_PROTOCOL_VERSION {
            return Err(BridgeError::ProtocolDesync(format!(
                "remote speaks protocol version {}",
                frame.protocol_version
            )));
        }
        if frame.id != id {
            return Err(BridgeError::ProtocolDesync(format!(
                "response id {} does not answer request {id}",
                frame.id
            )));
        }
        Ok(frame.body)
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        let link = self.link.get_mut().unwrap_or_else(|p| p.into_inner());
        if link.state == BridgeState::Ready {
            let line = Frame::new(link.next_id, Request::Close).to_line();
            let _ = link.writer.write_all(line.as_bytes()).and_then(|()| link.writer.flush());
        }
        link.state = BridgeState::Dead;
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Environment for BridgeHandle {
    fn env_id(&self) -> &str {
        &self.env_id
    }

    fn capabilities(&self) -> &EnvCapabilities {
        &self.caps
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        Ok(self.rpc_reset(seed)?)
    }

    fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, EnvError> {
        Ok(self.rpc_step(joint_action)?)
    }

    fn render(&self) -> Result<RenderFrame, EnvError> {
        Ok(self.rpc_render()?)
    }

    /// Buffered locally and sent with the next step.
    fn declare_intention(&mut self, controller: usize, target: Option<u32>) -> Result<(), EnvError> {
        if !self.caps.intentions {
            return Err(EnvError::Unsupported("intentions"));
        }
        if controller >= self.caps.num_controllers as usize {
            return Err(EnvError::SpaceViolation {
                controller,
                reason: "no such controller".into(),
            });
        }
        let link = self.link.get_mut().unwrap_or_else(|p| p.into_inner());
        link.intentions.resize(self.caps.num_controllers as usize, None);
        link.intentions[controller] = target;
        Ok(())
    }

    /// The remote's own snapshot when it sends one, otherwise just the call
    /// counters (the step results themselves are hashed by the session).
    fn snapshot(&self) -> Value {
        let link = self.lock();
        match &link.snapshot {
            Value::Null => serde_json::json!({"bridge": {"episodes": link.episodes, "steps": link.steps}}),
            s => s.clone(),
        }
    }
}
