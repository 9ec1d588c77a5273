//! Append-only event log, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use elab_core::clock::Timestamp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stream {
    Run,
    Session,
    Device,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub at: Timestamp,
    pub stream: Stream,
    pub stream_id: String,
    pub kind: String,
    pub actor: String,
    pub payload: serde_json::Value,
}

/// An event before the log numbers it.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub at: Timestamp,
    pub stream: Stream,
    pub stream_id: String,
    pub kind: String,
    pub actor: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("event log i/o: {0}")]
    Io(String),
    #[error("event log corrupt at seq {seq} (line {line}): {reason}")]
    CorruptLog { seq: u64, line: usize, reason: String },
}

fn io(e: std::io::Error) -> LogError {
    LogError::Io(e.to_string())
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    events: Vec<Event>,
    fsync: bool,
}

/// Parses a whole log and returns the events plus the length of the valid
/// prefix. A final line without its newline is a torn write from a crash:
/// it was never acknowledged and is dropped.
fn parse(text: &str) -> Result<(Vec<Event>, usize), LogError> {
    let mut events: Vec<Event> = Vec::new();
    let mut good_bytes = 0;
    let mut rest = text;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let expected = events.last().map_or(1, |e| e.seq + 1);
        let Some(end) = rest.find('\n') else { break };
        let line = &rest[..end];
        let event: Event = serde_json::from_str(line).map_err(|e| LogError::CorruptLog {
            seq: expected,
            line: line_no,
            reason: e.to_string(),
        })?;
        if event.seq != expected {
            return Err(LogError::CorruptLog {
                seq: expected,
                line: line_no,
                reason: format!("expected seq {expected}, found {}", event.seq),
            });
        }
        events.push(event);
        good_bytes += end + 1;
        rest = &rest[end + 1..];
    }
    Ok((events, good_bytes))
}

impl EventLog {
    /// Opens or creates the log, validating every existing line.
    pub fn open(path: &Path, fsync: bool) -> Result<EventLog, LogError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let text = match std::fs::read(path) {
            Ok(b) => String::from_utf8(b).map_err(|e| LogError::CorruptLog {
                seq: 0,
                line: 0,
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let (events, good) = parse(&text)?;
        let mut file = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(path).map_err(io)?;
        if good < text.len() {
            file.set_len(good as u64).map_err(io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
            events,
            fsync,
        })
    }

    /// Reads and validates a log without opening it for writing.
    pub fn read(path: &Path) -> Result<Vec<Event>, LogError> {
        let text = std::fs::read_to_string(path).map_err(io)?;
        Ok(parse(&text)?.0)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Numbers `e` after the last event and writes it durably.
    pub fn append(&mut self, e: NewEvent) -> Result<u64, LogError> {
        let event = Event {
            seq: self.last_seq() + 1,
            at: e.at,
            stream: e.stream,
            stream_id: e.stream_id,
            kind: e.kind,
            actor: e.actor,
            payload: e.payload,
        };
        let mut line = serde_json::to_string(&event).map_err(|e| LogError::Io(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io)?;
        if self.fsync {
            self.file.sync_data().map_err(io)?;
        }
        let seq = event.seq;
        self.events.push(event);
        Ok(seq)
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events with seq strictly greater than `seq`.
    pub fn since(&self, seq: u64) -> &[Event] {
        let start = self.events.partition_point(|e| e.seq <= seq);
        &self.events[start..]
    }
}
