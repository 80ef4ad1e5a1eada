//! Operational loop around the smoke detector: poll cameras, detect, raise
//! alerts, wait for an operator decision and notify webhooks. Every state
//! change is an event-log record, so state can be rebuilt by replay.

pub mod alert;
pub mod api;
pub mod config;
pub mod dispatch;
pub mod engine;
pub mod eventlog;
pub mod poller;
pub mod queue;
pub mod service;
pub mod snapshots;
pub mod state;
pub mod worker;

pub use alert::{Alert, AlertState, BoxScore, Decision, DispatchOutcome};
pub use config::{CameraSource, FrameSourceKind, ServiceConfig};
pub use engine::{Engine, EngineError, FrameReport, StreamMessage};
pub use eventlog::{replay_file, Event, EventLog, LogError, LogRecord};
pub use service::{start, start_with_model, ServiceError, ServiceHandle};
pub use state::ServiceState;
