//! Append-only JSONL event log: a header line, then one event per line with
//! dense sequence numbers from 0.
//!
//! Appends are write-ahead: a batch is flushed (and synced, for files)
//! before the caller may release the messages it caused.

mod replay;

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::hash::canonical_of;
use crate::protocol::{Envelope, MessageKind};

pub use replay::{export_trajectories, export_trajectories_for, replay, ReplayError, ReplayReport};

pub const FORMAT_VERSION: u32 = 1;

/// Build identifier written into every header.
pub const BUILD: &str = concat!("loopstage-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Message(MessageKind),
    SessionCreated,
    TimeoutSubstitution,
    AgentAction,
    LearnerUpdate,
    StateHash,
    BarrierRelease,
    Disconnect,
    Resume,
    InputRejected,
    AdminEnd,
}

const EXTRA_KINDS: [(EventKind, &str); 10] = [
    (EventKind::SessionCreated, "SessionCreated"),
    (EventKind::TimeoutSubstitution, "TimeoutSubstitution"),
    (EventKind::AgentAction, "AgentAction"),
    (EventKind::LearnerUpdate, "LearnerUpdate"),
    (EventKind::StateHash, "StateHash"),
    (EventKind::BarrierRelease, "BarrierRelease"),
    (EventKind::Disconnect, "Disconnect"),
    (EventKind::Resume, "Resume"),
    (EventKind::InputRejected, "InputRejected"),
    (EventKind::AdminEnd, "AdminEnd"),
];

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Message(k) => k.as_str(),
            other => EXTRA_KINDS
                .iter()
                .find(|(k, _)| *k == other)
                .map(|(_, name)| *name)
                .expect("every extra kind is listed"),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        MessageKind::parse(name)
            .map(EventKind::Message)
            .or_else(|| EXTRA_KINDS.iter().find(|(_, n)| *n == name).map(|(k, _)| *k))
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for EventKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EventKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        EventKind::parse(&name).ok_or_else(|| serde::de::Error::custom(format!("unknown event kind `{name}`")))
    }
}

/// One immutable log record. Message events carry the full wire envelope
/// as their payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub seq: u64,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick: Option<u64>,
    pub kind: EventKind,
    pub payload: Value,
}

impl Event {
    /// The envelope of a message event (or of a resume or rejected input).
    pub fn envelope(&self) -> Option<Envelope> {
        let v = match self.kind {
            EventKind::Message(_) | EventKind::Resume => &self.payload,
            EventKind::InputRejected => self.payload.get("envelope")?,
            _ => return None,
        };
        serde_json::from_value(v.clone()).ok()
    }

    pub fn to_line(&self) -> String {
        canonical_of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format_version: u32,
    pub session_id: String,
    /// SHA-256 of the canonical form of the redacted experiment definition.
    pub experiment_hash: String,
    pub master_seed: u64,
    pub build: String,
}

impl LogHeader {
    pub fn new(session_id: &str, experiment_hash: &str, master_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            session_id: session_id.into(),
            experiment_hash: experiment_hash.into(),
            master_seed,
            build: BUILD.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("event seq {got} breaks the dense sequence (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("log is halted after an earlier storage failure")]
    Halted,
}

/// Byte sink behind an [`EventLog`]; `sync` makes flushed bytes durable.
pub trait LogSink: Write + Send {
    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl LogSink for File {
    fn sync(&mut self) -> io::Result<()> {
        self.sync_data()
    }
}

impl LogSink for Vec<u8> {}

impl<S: LogSink + ?Sized> LogSink for Box<S> {
    fn sync(&mut self) -> io::Result<()> {
        (**self).sync()
    }
}

/// Sink that accepts `capacity` bytes and then fails every write, like a
/// full disk. Accepted bytes are kept for inspection.
#[derive(Debug, Default)]
pub struct FailingSink {
    pub written: Vec<u8>,
    pub capacity: usize,
}

impl FailingSink {
    pub fn new(capacity: usize) -> Self {
        Self {
            written: Vec::new(),
            capacity,
        }
    }
}

impl Write for FailingSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.written.len() + buf.len() > self.capacity {
            return Err(io::Error::new(io::ErrorKind::StorageFull, "no space left on device"));
        }
        self.written.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl LogSink for FailingSink {}

/// Ordered appender for one session.
pub struct EventLog<S: LogSink> {
    sink: S,
    next_seq: u64,
    halted: bool,
}

impl<S: LogSink> EventLog<S> {
    /// Writes the header line and syncs it.
    pub fn create(mut sink: S, header: &LogHeader) -> Result<Self, StoreError> {
        writeln!(sink, "{}", canonical_of(header))?;
        sink.flush()?;
        sink.sync()?;
        Ok(Self {
            sink,
            next_seq: 0,
            halted: false,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Appends a batch atomically from the caller's point of view: on error
    /// nothing after the failure is considered logged and the log halts.
    pub fn append_batch(&mut self, events: &[Event]) -> Result<(), StoreError> {
        if self.halted {
            return Err(StoreError::Halted);
        }
        let mut buf = String::new();
        let mut expected = self.next_seq;
        for e in events {
            if e.seq != expected {
                self.halted = true;
                return Err(StoreError::OutOfOrder { expected, got: e.seq });
            }
            buf.push_str(&e.to_line());
            buf.push('\n');
            expected += 1;
        }
        if events.is_empty() {
            return Ok(());
        }
        let res = self
            .sink
            .write_all(buf.as_bytes())
            .and_then(|()| self.sink.flush())
            .and_then(|()| self.sink.sync());
        if let Err(e) = res {
            self.halted = true;
            return Err(StoreError::StorageFailure(e));
        }
        self.next_seq = expected;
        Ok(())
    }

    pub fn append(&mut self, event: &Event) -> Result<u64, StoreError> {
        self.append_batch(std::slice::from_ref(event))?;
        Ok(event.seq)
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn into_sink(self) -> S {
        self.sink
    }
}

/// A parsed log. `torn_tail` is set when the final line was cut short by a
/// crash mid-write and has been dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LogFile {
    pub header: LogHeader,
    pub events: Vec<Event>,
    pub torn_tail: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorruptLog {
    #[error("log is empty")]
    Empty,
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unsupported log format version {0}")]
    Version(u32),
    #[error("sequence gap at line {line}: expected seq {expected}, found {found}")]
    Gap { line: usize, expected: u64, found: u64 },
    #[error("{0}")]
    Invalid(String),
}

/// Parses a log, checking the header and the dense sequence. An unparseable
/// last line without a trailing newline is treated as a torn write.
pub fn parse_log(text: &str) -> Result<LogFile, CorruptLog> {
    let ends_clean = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let (first, rest) = lines.split_first().ok_or(CorruptLog::Empty)?;
    let header: LogHeader = serde_json::from_str(first).map_err(|e| CorruptLog::Parse {
        line: 1,
        detail: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(CorruptLog::Version(header.format_version));
    }
    let mut events = Vec::with_capacity(rest.len());
    let mut torn_tail = false;
    for (i, line) in rest.iter().enumerate() {
        let line_no = i + 2;
        match serde_json::from_str::<Event>(line) {
            Ok(e) => {
                let expected = events.len() as u64;
                if e.seq != expected {
                    return Err(CorruptLog::Gap {
                        line: line_no,
                        expected,
                        found: e.seq,
                    });
                }
                events.push(e);
            }
            Err(_) if i + 1 == rest.len() && !ends_clean => torn_tail = true,
            Err(e) => {
                return Err(CorruptLog::Parse {
                    line: line_no,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(LogFile {
        header,
        events,
        torn_tail,
    })
}

/// Outer error: the file could not be read. Inner: it is not a valid log.
pub fn read_log(path: &Path) -> io::Result<Result<LogFile, CorruptLog>> {
    Ok(parse_log(&std::fs::read_to_string(path)?))
}
