//! Service configuration, loaded from JSON or TOML.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing JSON config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parsing TOML config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where a camera's frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSourceKind {
    /// HTTP endpoint returning the latest still image.
    Url(String),
    /// Directory of images served in file-name order, one per poll.
    ReplayDir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSource {
    pub id: String,
    pub source: FrameSourceKind,
    #[serde(default = "default_poll_interval")]
    pub poll_interval_secs: f64,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_poll_interval() -> f64 {
    30.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub cameras: Vec<CameraSource>,
    /// Detector checkpoint file.
    pub checkpoint: PathBuf,
    /// Holds the event log and the snapshot store.
    pub data_dir: PathBuf,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    /// Consecutive detection frames needed to raise an alert.
    pub debounce_frames: u32,
    /// An undecided alert seen this recently absorbs new detections.
    pub suppression_window_secs: u64,
    pub webhooks: Vec<String>,
    pub webhook_attempts: u32,
    pub webhook_timeout_secs: f64,
    /// Interval of the sweep that retries failed dispatches.
    pub dispatch_sweep_secs: f64,
    pub api_host: String,
    /// 0 picks a free port.
    pub api_port: u16,
    /// When set, confirm and reject require `Authorization: Bearer <token>`.
    pub operator_token: Option<String>,
    pub queue_capacity: usize,
    pub workers: usize,
    /// Target time from frame arrival to recorded detections.
    pub processing_budget_ms: u64,
    pub max_backoff_secs: f64,
    /// Consecutive poll failures before a camera is reported degraded.
    pub degraded_after: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cameras: Vec::new(),
            checkpoint: PathBuf::from("fixtures/detector.smkw"),
            data_dir: PathBuf::from("smokewatch-data"),
            score_thresh: 0.5,
            nms_thresh: 0.5,
            debounce_frames: 1,
            suppression_window_secs: 600,
            webhooks: Vec::new(),
            webhook_attempts: 3,
            webhook_timeout_secs: 5.0,
            dispatch_sweep_secs: 30.0,
            api_host: "127.0.0.1".to_string(),
            api_port: 8080,
            operator_token: None,
            queue_capacity: 64,
            workers: 1,
            processing_budget_ms: 2000,
            max_backoff_secs: 300.0,
            degraded_after: 3,
        }
    }
}

impl ServiceConfig {
    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ServiceConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        // Relative paths are taken relative to the config file.
        if let Some(base) = path.parent() {
            config.resolve_relative_to(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoint);
        fix(&mut self.data_dir);
        for cam in &mut self.cameras {
            if let FrameSourceKind::ReplayDir(dir) = &mut cam.source {
                fix(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut ids = HashSet::new();
        for cam in &self.cameras {
            if cam.id.is_empty() {
                return bad("camera ids must not be empty".into());
            }
            if !ids.insert(cam.id.as_str()) {
                return bad(format!("duplicate camera id `{}`", cam.id));
            }
            if !(cam.poll_interval_secs >= 1.0) {
                return bad(format!("camera `{}`: poll interval must be at least 1 s", cam.id));
            }
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.score_thresh) || !unit(self.nms_thresh) {
            return bad("thresholds must lie in (0, 1)".into());
        }
        if self.debounce_frames == 0 {
            return bad("debounce_frames must be at least 1".into());
        }
        if self.webhook_attempts == 0 || self.queue_capacity == 0 || self.workers == 0 || self.degraded_after == 0 {
            return bad("webhook_attempts, queue_capacity, workers and degraded_after must be at least 1".into());
        }
        if !(self.webhook_timeout_secs > 0.0) || !(self.dispatch_sweep_secs > 0.0) || !(self.max_backoff_secs > 0.0) {
            return bad("timeouts and intervals must be positive".into());
        }
        Ok(())
    }
}
