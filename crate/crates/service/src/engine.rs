//! Single writer for the event log: every state change goes through here.

use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::alert::{Alert, AlertState, BoxScore, Decision, DispatchOutcome, TransitionError};
use crate::eventlog::{Event, EventLog, Health, LogError, LogRecord};
use crate::state::{ApplyError, CameraState, ServiceState};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error("unknown alert `{0}`")]
    NotFound(String),
    #[error(transparent)]
    InvalidTransition(#[from] TransitionError),
}

/// One message on the live event stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamMessage {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alert: Option<Alert>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraState>,
}

/// A processed frame as reported by a detection worker.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub camera_id: String,
    pub captured_at: DateTime<Utc>,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<BoxScore>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameOutcome {
    pub created: Option<String>,
    pub attached: Option<String>,
}

pub struct Engine {
    state: ServiceState,
    log: EventLog,
    debounce: u32,
    window: Duration,
    events: broadcast::Sender<StreamMessage>,
}

impl Engine {
    /// Opens the log at `path` and rebuilds state from it.
    pub fn open(path: impl AsRef<Path>, debounce: u32, window_secs: u64) -> Result<Self, LogError> {
        let (log, state) = EventLog::open(path)?;
        let (events, _) = broadcast::channel(1024);
        Ok(Self {
            state,
            log,
            debounce: debounce.max(1),
            window: Duration::seconds(window_secs as i64),
            events,
        })
    }

    pub fn set_sync(&mut self, sync: bool) {
        self.log.set_sync(sync);
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamMessage> {
        self.events.subscribe()
    }

    pub fn state(&self) -> &ServiceState {
        &self.state
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    fn commit(&mut self, event: Event, at: DateTime<Utc>) -> Result<LogRecord, EngineError> {
        let record = self.log.stage(event, at);
        // apply() validates before mutating, so a rejected record changes nothing.
        self.state.apply(&record)?;
        // On a write failure the state is ahead of the log; the log then
        // refuses all further writes and the service must restart.
        self.log.append(&record)?;
        self.publish(&record);
        Ok(record)
    }

    fn publish(&self, record: &LogRecord) {
        let (alert, camera_id, camera) = match &record.event {
            Event::CameraHealth { camera_id, .. } => {
                (None, Some(camera_id.clone()), self.state.cameras.get(camera_id).cloned())
            }
            e => match e.alert_id() {
                Some(id) => (self.state.alert(id).cloned(), None, None),
                None => return,
            },
        };
        // Nobody listening is fine.
        let _ = self.events.send(StreamMessage {
            seq: record.seq,
            kind: record.event.kind().to_string(),
            at: record.at,
            alert,
            camera_id,
            camera,
        });
    }

    /// Records a processed frame and raises or extends an alert when the
    /// camera's detection streak reaches the debounce count.
    pub fn record_frame(&mut self, frame: FrameReport, at: DateTime<Utc>) -> Result<FrameOutcome, EngineError> {
        let has_detections = !frame.detections.is_empty();
        let camera_id = frame.camera_id.clone();
        let captured_at = frame.captured_at;
        let boxes = frame.detections.clone();
        let (sha, width, height) = (frame.sha256.clone(), frame.width, frame.height);
        self.commit(
            Event::Frame {
                camera_id: frame.camera_id,
                captured_at: frame.captured_at,
                sha256: frame.sha256,
                width: frame.width,
                height: frame.height,
                detections: frame.detections,
                latency_ms: frame.latency_ms,
            },
            at,
        )?;
        let mut outcome = FrameOutcome::default();
        let cam = &self.state.cameras[&camera_id];
        if !has_detections || cam.streak < self.debounce {
            return Ok(outcome);
        }
        let first_seen = cam.streak_start.unwrap_or(captured_at);
        if let Some(open) = self.state.open_alert_for(&camera_id, captured_at - self.window) {
            let alert_id = open.id.clone();
            self.commit(
                Event::AlertAttached {
                    alert_id: alert_id.clone(),
                    captured_at,
                },
                at,
            )?;
            outcome.attached = Some(alert_id);
            return Ok(outcome);
        }
        let alert_id = format!("alert-{:06}", self.log.next_seq());
        self.commit(
            Event::AlertCreated {
                alert_id: alert_id.clone(),
                camera_id,
                first_seen,
                last_seen: captured_at,
                boxes,
                snapshot_sha256: sha,
                frame_width: width,
                frame_height: height,
            },
            at,
        )?;
        self.transition(&alert_id, AlertState::PendingConfirmation, None, at)?;
        outcome.created = Some(alert_id);
        Ok(outcome)
    }

    pub fn record_rejected_frame(
        &mut self,
        camera_id: &str,
        captured_at: DateTime<Utc>,
        sha256: &str,
        reason: &str,
        at: DateTime<Utc>,
    ) -> Result<(), EngineError> {
        self.commit(
            Event::FrameRejected {
                camera_id: camera_id.to_string(),
                captured_at,
                sha256: sha256.to_string(),
                reason: reason.to_string(),
            },
            at,
        )?;
        Ok(())
    }

    /// Logs a camera health change; unchanged health is not recorded.
    pub fn record_health(
        &mut self,
        camera_id: &str,
        health: Health,
        consecutive_failures: u32,
        at: DateTime<Utc>,
    ) -> Result<(), EngineError> {
        let current = self.state.cameras.get(camera_id).and_then(|c| c.health);
        if current == Some(health) {
            return Ok(());
        }
        self.commit(
            Event::CameraHealth {
                camera_id: camera_id.to_string(),
                health,
                consecutive_failures,
            },
            at,
        )?;
        Ok(())
    }

    /// Moves an alert to `to` if the transition table allows it.
    pub fn transition(
        &mut self,
        alert_id: &str,
        to: AlertState,
        operator_id: Option<String>,
        at: DateTime<Utc>,
    ) -> Result<Alert, EngineError> {
        let from = self
            .state
            .alert(alert_id)
            .ok_or_else(|| EngineError::NotFound(alert_id.to_string()))?
            .state;
        from.transition(to)?;
        self.commit(
            Event::AlertTransition {
                alert_id: alert_id.to_string(),
                from,
                to,
                operator_id,
            },
            at,
        )?;
        Ok(self.state.alerts[alert_id].clone())
    }

    pub fn decide(
        &mut self,
        alert_id: &str,
        decision: Decision,
        operator_id: &str,
        at: DateTime<Utc>,
    ) -> Result<Alert, EngineError> {
        self.transition(alert_id, decision.target(), Some(operator_id.to_string()), at)
    }

    /// Records webhook outcomes for a CONFIRMED alert. One success moves it
    /// to DISPATCHED; otherwise it is flagged for the retry sweep.
    pub fn record_dispatch(
        &mut self,
        alert_id: &str,
        outcomes: Vec<DispatchOutcome>,
        at: DateTime<Utc>,
    ) -> Result<Alert, EngineError> {
        let state = self
            .state
            .alert(alert_id)
            .ok_or_else(|| EngineError::NotFound(alert_id.to_string()))?
            .state;
        if state != AlertState::Confirmed {
            return Err(TransitionError {
                from: state,
                to: AlertState::Dispatched,
            }
            .into());
        }
        let delivered = outcomes.iter().any(|o| o.ok);
        for outcome in outcomes {
            self.commit(
                Event::Dispatch {
                    alert_id: alert_id.to_string(),
                    outcome,
                },
                at,
            )?;
        }
        if delivered {
            self.transition(alert_id, AlertState::Dispatched, None, at)
        } else {
            self.commit(
                Event::DispatchFailed {
                    alert_id: alert_id.to_string(),
                },
                at,
            )?;
            Ok(self.state.alerts[alert_id].clone())
        }
    }

    /// CONFIRMED alerts still waiting for a successful dispatch.
    pub fn awaiting_dispatch(&self) -> Vec<Alert> {
        self.state.alerts_sorted(Some(AlertState::Confirmed))
    }
}
