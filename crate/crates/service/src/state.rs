//! In-memory service state, a pure function of the event log.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alert::{Alert, AlertState, TransitionError};
use crate::eventlog::{Event, Health, LogRecord, LOG_VERSION};

#[derive(Debug, Error, PartialEq)]
pub enum ApplyError {
    #[error("unsupported record version {0}")]
    Version(u32),
    #[error("sequence {got} follows {prev}")]
    Sequence { prev: u64, got: u64 },
    #[error("alert `{0}` already exists")]
    DuplicateAlert(String),
    #[error("unknown alert `{0}`")]
    UnknownAlert(String),
    #[error("alert `{id}`: recorded source state {recorded} but alert is {actual}")]
    StaleSource { id: String, recorded: AlertState, actual: AlertState },
    #[error("alert `{id}`: {source}")]
    Transition { id: String, source: TransitionError },
    #[error("alert `{id}`: {detail}")]
    Inconsistent { id: String, detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    pub frames: u64,
    pub rejected: u64,
    pub last_frame_at: Option<DateTime<Utc>>,
    pub last_sha256: Option<String>,
    /// Consecutive frames with at least one detection.
    pub streak: u32,
    pub streak_start: Option<DateTime<Utc>>,
    pub health: Option<Health>,
    pub consecutive_failures: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceState {
    pub last_seq: u64,
    pub alerts: BTreeMap<String, Alert>,
    pub cameras: BTreeMap<String, CameraState>,
}

impl ServiceState {
    pub fn alert(&self, id: &str) -> Option<&Alert> {
        self.alerts.get(id)
    }

    /// Alerts sorted by first sighting, then id.
    pub fn alerts_sorted(&self, state: Option<AlertState>) -> Vec<Alert> {
        let mut out: Vec<Alert> = self
            .alerts
            .values()
            .filter(|a| state.is_none_or(|s| a.state == s))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.first_seen.cmp(&b.first_seen).then_with(|| a.id.cmp(&b.id)));
        out
    }

    /// Undecided alert of `camera` last seen no earlier than `since`.
    pub fn open_alert_for(&self, camera: &str, since: DateTime<Utc>) -> Option<&Alert> {
        self.alerts
            .values()
            .filter(|a| a.camera_id == camera && a.state.is_undecided() && a.last_seen >= since)
            .max_by_key(|a| a.last_seen)
    }

    fn alert_mut(&mut self, id: &str) -> Result<&mut Alert, ApplyError> {
        self.alerts.get_mut(id).ok_or_else(|| ApplyError::UnknownAlert(id.to_string()))
    }

    /// Applies one record. Validation happens before any mutation, so an
    /// error leaves the state untouched.
    pub fn apply(&mut self, record: &LogRecord) -> Result<(), ApplyError> {
        if record.v != LOG_VERSION {
            return Err(ApplyError::Version(record.v));
        }
        if record.seq != self.last_seq + 1 {
            return Err(ApplyError::Sequence {
                prev: self.last_seq,
                got: record.seq,
            });
        }
        match &record.event {
            Event::Frame {
                camera_id,
                captured_at,
                sha256,
                detections,
                ..
            } => {
                let cam = self.cameras.entry(camera_id.clone()).or_default();
                cam.frames += 1;
                cam.last_frame_at = Some(*captured_at);
                cam.last_sha256 = Some(sha256.clone());
                if detections.is_empty() {
                    cam.streak = 0;
                    cam.streak_start = None;
                } else {
                    cam.streak += 1;
                    cam.streak_start.get_or_insert(*captured_at);
                }
            }
            Event::FrameRejected { camera_id, .. } => {
                let cam = self.cameras.entry(camera_id.clone()).or_default();
                cam.rejected += 1;
                cam.streak = 0;
                cam.streak_start = None;
            }
            Event::CameraHealth {
                camera_id,
                health,
                consecutive_failures,
            } => {
                let cam = self.cameras.entry(camera_id.clone()).or_default();
                cam.health = Some(*health);
                cam.consecutive_failures = *consecutive_failures;
            }
            Event::AlertCreated {
                alert_id,
                camera_id,
                first_seen,
                last_seen,
                boxes,
                snapshot_sha256,
                frame_width,
                frame_height,
            } => {
                if self.alerts.contains_key(alert_id) {
                    return Err(ApplyError::DuplicateAlert(alert_id.clone()));
                }
                self.alerts.insert(
                    alert_id.clone(),
                    Alert {
                        id: alert_id.clone(),
                        camera_id: camera_id.clone(),
                        state: AlertState::New,
                        boxes: boxes.clone(),
                        first_seen: *first_seen,
                        last_seen: *last_seen,
                        frame_count: 1,
                        snapshot_sha256: snapshot_sha256.clone(),
                        frame_width: *frame_width,
                        frame_height: *frame_height,
                        operator_id: None,
                        decided_at: None,
                        dispatched_at: None,
                        dispatch_failed: false,
                        dispatch_log: Vec::new(),
                    },
                );
            }
            Event::AlertAttached { alert_id, captured_at } => {
                let alert = self.alert_mut(alert_id)?;
                if !alert.state.is_undecided() {
                    return Err(ApplyError::Inconsistent {
                        id: alert_id.clone(),
                        detail: format!("frame attached to a {} alert", alert.state),
                    });
                }
                alert.last_seen = alert.last_seen.max(*captured_at);
                alert.frame_count += 1;
            }
            Event::AlertTransition {
                alert_id,
                from,
                to,
                operator_id,
            } => {
                let alert = self.alert_mut(alert_id)?;
                if alert.state != *from {
                    return Err(ApplyError::StaleSource {
                        id: alert_id.clone(),
                        recorded: *from,
                        actual: alert.state,
                    });
                }
                alert.state = from.transition(*to).map_err(|source| ApplyError::Transition {
                    id: alert_id.clone(),
                    source,
                })?;
                match to {
                    AlertState::Confirmed | AlertState::Rejected => {
                        alert.operator_id = operator_id.clone();
                        alert.decided_at = Some(record.at);
                    }
                    AlertState::Dispatched => {
                        alert.dispatched_at = Some(record.at);
                        alert.dispatch_failed = false;
                    }
                    _ => {}
                }
            }
            Event::Dispatch { alert_id, outcome } => {
                let alert = self.alert_mut(alert_id)?;
                if !matches!(alert.state, AlertState::Confirmed | AlertState::Dispatched) {
                    return Err(ApplyError::Inconsistent {
                        id: alert_id.clone(),
                        detail: format!("dispatch recorded for a {} alert", alert.state),
                    });
                }
                alert.dispatch_log.push(outcome.clone());
            }
            Event::DispatchFailed { alert_id } => {
                let alert = self.alert_mut(alert_id)?;
                if alert.state != AlertState::Confirmed {
                    return Err(ApplyError::Inconsistent {
                        id: alert_id.clone(),
                        detail: format!("dispatch failure flagged on a {} alert", alert.state),
                    });
                }
                alert.dispatch_failed = true;
            }
        }
        self.last_seq = record.seq;
        Ok(())
    }
}
