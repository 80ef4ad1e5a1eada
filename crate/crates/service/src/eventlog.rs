//! Append-only JSONL event log.
//!
//! One record per line: `{"v":1,"seq":N,"at":"...","type":"...",...}`.
//! Each record is written with a single `write` of the full line, so a crash
//! can only leave a torn final line, which [`EventLog::open`] discards.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alert::{AlertState, BoxScore, DispatchOutcome};
use crate::state::ServiceState;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Healthy,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    /// A processed frame and its detections.
    Frame {
        camera_id: String,
        captured_at: DateTime<Utc>,
        sha256: String,
        width: u32,
        height: u32,
        detections: Vec<BoxScore>,
        latency_ms: f64,
    },
    FrameRejected {
        camera_id: String,
        captured_at: DateTime<Utc>,
        sha256: String,
        reason: String,
    },
    CameraHealth {
        camera_id: String,
        health: Health,
        consecutive_failures: u32,
    },
    AlertCreated {
        alert_id: String,
        camera_id: String,
        first_seen: DateTime<Utc>,
        last_seen: DateTime<Utc>,
        boxes: Vec<BoxScore>,
        snapshot_sha256: String,
        frame_width: u32,
        frame_height: u32,
    },
    /// A later detection frame folded into an undecided alert.
    AlertAttached {
        alert_id: String,
        captured_at: DateTime<Utc>,
    },
    AlertTransition {
        alert_id: String,
        from: AlertState,
        to: AlertState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        operator_id: Option<String>,
    },
    Dispatch {
        alert_id: String,
        outcome: DispatchOutcome,
    },
    /// Every endpoint failed; the alert stays CONFIRMED for the sweep.
    DispatchFailed {
        alert_id: String,
    },
}

impl Event {
    pub fn alert_id(&self) -> Option<&str> {
        match self {
            Event::AlertCreated { alert_id, .. }
            | Event::AlertAttached { alert_id, .. }
            | Event::AlertTransition { alert_id, .. }
            | Event::Dispatch { alert_id, .. }
            | Event::DispatchFailed { alert_id } => Some(alert_id),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Event::Frame { .. } => "frame",
            Event::FrameRejected { .. } => "frame_rejected",
            Event::CameraHealth { .. } => "camera_health",
            Event::AlertCreated { .. } => "alert_created",
            Event::AlertAttached { .. } => "alert_attached",
            Event::AlertTransition { .. } => "alert_transition",
            Event::Dispatch { .. } => "dispatch",
            Event::DispatchFailed { .. } => "dispatch_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub v: u32,
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("event log line {line}: {detail}")]
    Integrity { line: usize, detail: String },
    #[error("event log is unusable after an earlier write failure")]
    Poisoned,
}

/// Parses a log, applying every record to a fresh state. A final line that
/// is incomplete or does not parse is treated as torn and skipped.
pub fn replay_bytes(bytes: &[u8]) -> Result<(ServiceState, Vec<LogRecord>, usize), LogError> {
    let mut state = ServiceState::default();
    let mut records = Vec::new();
    let mut good_len = 0;
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
        let (line, next, complete) = match end {
            Some(e) => (&bytes[offset..e], e + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            if complete {
                good_len = next;
            }
            offset = next;
            continue;
        }
        let record: LogRecord = match serde_json::from_slice(line) {
            Ok(r) if complete => r,
            // An unterminated or unparseable last line is a torn write.
            Ok(_) => break,
            Err(_) if is_last => break,
            Err(e) => {
                return Err(LogError::Integrity {
                    line: line_no,
                    detail: e.to_string(),
                })
            }
        };
        state.apply(&record).map_err(|e| LogError::Integrity {
            line: line_no,
            detail: e.to_string(),
        })?;
        records.push(record);
        good_len = next;
        offset = next;
    }
    Ok((state, records, good_len))
}

pub fn replay_file(path: impl AsRef<Path>) -> Result<(ServiceState, Vec<LogRecord>), LogError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let (state, records, _) = replay_bytes(&bytes)?;
    Ok((state, records))
}

/// Writer half of the log. Not shared: the engine is the single writer.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
    poisoned: bool,
    sync: bool,
}

impl EventLog {
    /// Opens or creates the log, replays it and drops a torn tail so new
    /// records start on a clean line.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, ServiceState), LogError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (state, records, good_len) = replay_bytes(&bytes)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if good_len < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - good_len, "discarding torn log tail");
            file.set_len(good_len as u64)?;
        }
        let next_seq = records.last().map_or(1, |r| r.seq + 1);
        Ok((
            Self {
                path,
                file,
                next_seq,
                poisoned: false,
                sync: true,
            },
            state,
        ))
    }

    /// Whether every append is flushed to stable storage (default on).
    pub fn set_sync(&mut self, sync: bool) {
        self.sync = sync;
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Record that would be written next; not yet durable.
    pub fn stage(&self, event: Event, at: DateTime<Utc>) -> LogRecord {
        LogRecord {
            v: LOG_VERSION,
            seq: self.next_seq,
            at,
            event,
        }
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), LogError> {
        if self.poisoned {
            return Err(LogError::Poisoned);
        }
        debug_assert_eq!(record.seq, self.next_seq);
        let mut line = serde_json::to_vec(record).map_err(io::Error::from)?;
        line.push(b'\n');
        let mut result = self.file.write_all(&line);
        if self.sync && result.is_ok() {
            result = self.file.sync_data();
        }
        if let Err(e) = result {
            self.poisoned = true;
            return Err(e.into());
        }
        self.next_seq += 1;
        Ok(())
    }
}
