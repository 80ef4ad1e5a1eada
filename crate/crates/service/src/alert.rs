//! Alert lifecycle.
//!
//! ```text
//! NEW -> PENDING_CONFIRMATION -> CONFIRMED -> DISPATCHED
//!                             \-> REJECTED
//! ```

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertState {
    New,
    PendingConfirmation,
    Confirmed,
    Rejected,
    Dispatched,
}

pub const ALL_STATES: [AlertState; 5] = [
    AlertState::New,
    AlertState::PendingConfirmation,
    AlertState::Confirmed,
    AlertState::Rejected,
    AlertState::Dispatched,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid transition {from} -> {to}")]
pub struct TransitionError {
    pub from: AlertState,
    pub to: AlertState,
}

impl AlertState {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertState::New => "NEW",
            AlertState::PendingConfirmation => "PENDING_CONFIRMATION",
            AlertState::Confirmed => "CONFIRMED",
            AlertState::Rejected => "REJECTED",
            AlertState::Dispatched => "DISPATCHED",
        }
    }

    pub fn can_transition(self, to: AlertState) -> bool {
        use AlertState::*;
        matches!(
            (self, to),
            (New, PendingConfirmation) | (PendingConfirmation, Confirmed) | (PendingConfirmation, Rejected) | (Confirmed, Dispatched)
        )
    }

    pub fn transition(self, to: AlertState) -> Result<AlertState, TransitionError> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(TransitionError { from: self, to })
        }
    }

    /// Still waiting for an operator decision.
    pub fn is_undecided(self) -> bool {
        matches!(self, AlertState::New | AlertState::PendingConfirmation)
    }
}

impl fmt::Display for AlertState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlertState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_STATES
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown alert state `{s}`"))
    }
}

/// A detection box in source-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxScore {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Confirm,
    Reject,
}

impl Decision {
    pub fn target(self) -> AlertState {
        match self {
            Decision::Confirm => AlertState::Confirmed,
            Decision::Reject => AlertState::Rejected,
        }
    }
}

/// Outcome of notifying one webhook endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchOutcome {
    pub endpoint: String,
    pub ok: bool,
    pub attempts: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: String,
    pub camera_id: String,
    pub state: AlertState,
    /// Detections of the frame that raised the alert.
    pub boxes: Vec<BoxScore>,
    /// Capture time of the first frame of the detection streak.
    pub first_seen: DateTime<Utc>,
    /// Capture time of the latest detection frame attached to the alert.
    pub last_seen: DateTime<Utc>,
    pub frame_count: u32,
    pub snapshot_sha256: String,
    pub frame_width: u32,
    pub frame_height: u32,
    pub operator_id: Option<String>,
    pub decided_at: Option<DateTime<Utc>>,
    pub dispatched_at: Option<DateTime<Utc>>,
    pub dispatch_failed: bool,
    pub dispatch_log: Vec<DispatchOutcome>,
}
