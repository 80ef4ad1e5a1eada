//! Per-camera frame polling with de-duplication and exponential backoff.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::config::{CameraSource, FrameSourceKind};
use crate::eventlog::Health;
use crate::queue::Frame;
use crate::snapshots::sha256_hex;

#[derive(Debug, Error)]
pub enum PollError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("endpoint answered HTTP {0}")]
    Status(u16),
    #[error("reading replay frame: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PollOutcome {
    NewFrame(Frame),
    /// Same bytes as the previous frame.
    Duplicate,
    /// A replay directory has no more frames.
    Exhausted,
}

#[derive(Debug)]
enum Source {
    Http { client: reqwest::Client, url: String },
    Replay { files: Vec<PathBuf>, next: usize },
}

#[derive(Debug)]
pub struct Poller {
    camera: CameraSource,
    source: Source,
    last_sha: Option<String>,
    last_captured: Option<DateTime<Utc>>,
    failures: u32,
    degraded_after: u32,
    max_backoff: Duration,
}

fn replay_files(dir: &PathBuf) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl Poller {
    pub fn new(
        camera: CameraSource,
        client: reqwest::Client,
        degraded_after: u32,
        max_backoff_secs: f64,
    ) -> std::io::Result<Self> {
        let source = match &camera.source {
            FrameSourceKind::Url(url) => Source::Http {
                client,
                url: url.clone(),
            },
            FrameSourceKind::ReplayDir(dir) => Source::Replay {
                files: replay_files(dir)?,
                next: 0,
            },
        };
        Ok(Self {
            camera,
            source,
            last_sha: None,
            last_captured: None,
            failures: 0,
            degraded_after,
            max_backoff: Duration::from_secs_f64(max_backoff_secs),
        })
    }

    pub fn camera(&self) -> &CameraSource {
        &self.camera
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.failures
    }

    pub fn health(&self) -> Health {
        if self.failures >= self.degraded_after {
            Health::Degraded
        } else {
            Health::Healthy
        }
    }

    /// Poll interval, doubled per consecutive failure up to the cap.
    pub fn next_delay(&self) -> Duration {
        let base = Duration::from_secs_f64(self.camera.poll_interval_secs);
        if self.failures == 0 {
            return base;
        }
        let factor = 2f64.powi(self.failures.min(30) as i32);
        base.mul_f64(factor).min(self.max_backoff.max(base))
    }

    async fn fetch(&mut self) -> Result<Option<Vec<u8>>, PollError> {
        match &mut self.source {
            Source::Http { client, url } => {
                let resp = client.get(url.as_str()).send().await?;
                if !resp.status().is_success() {
                    return Err(PollError::Status(resp.status().as_u16()));
                }
                Ok(Some(resp.bytes().await?.to_vec()))
            }
            Source::Replay { files, next } => {
                let Some(path) = files.get(*next) else {
                    return Ok(None);
                };
                let bytes = fs::read(path)?;
                *next += 1;
                Ok(Some(bytes))
            }
        }
    }

    /// Fetches the latest frame. Failures count towards the backoff and the
    /// health status; any success resets them.
    pub async fn poll_once(&mut self, now: DateTime<Utc>) -> Result<PollOutcome, PollError> {
        let bytes = match self.fetch().await {
            Ok(Some(b)) => b,
            Ok(None) => {
                self.failures = 0;
                return Ok(PollOutcome::Exhausted);
            }
            Err(e) => {
                self.failures = self.failures.saturating_add(1);
                return Err(e);
            }
        };
        self.failures = 0;
        let sha = sha256_hex(&bytes);
        if self.last_sha.as_deref() == Some(sha.as_str()) {
            return Ok(PollOutcome::Duplicate);
        }
        self.last_sha = Some(sha.clone());
        // Capture times never go backwards for one camera.
        let captured_at = self.last_captured.map_or(now, |prev| prev.max(now));
        self.last_captured = Some(captured_at);
        Ok(PollOutcome::NewFrame(Frame {
            camera_id: self.camera.id.clone(),
            captured_at,
            bytes,
            sha256: sha,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(source: FrameSourceKind) -> CameraSource {
        CameraSource {
            id: "cam".into(),
            source,
            poll_interval_secs: 2.0,
            enabled: true,
        }
    }

    #[tokio::test]
    async fn replay_dir_dedups_and_exhausts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("001.png"), b"one").unwrap();
        fs::write(dir.path().join("002.png"), b"one").unwrap();
        fs::write(dir.path().join("003.png"), b"two").unwrap();
        fs::write(dir.path().join("notes.txt"), b"skip").unwrap();
        let mut p = Poller::new(
            camera(FrameSourceKind::ReplayDir(dir.path().to_path_buf())),
            reqwest::Client::new(),
            3,
            300.0,
        )
        .unwrap();
        let t0 = Utc::now();
        let PollOutcome::NewFrame(f) = p.poll_once(t0).await.unwrap() else { panic!() };
        assert_eq!(f.bytes, b"one");
        assert_eq!(f.sha256, sha256_hex(b"one"));
        assert_eq!(p.poll_once(t0).await.unwrap(), PollOutcome::Duplicate);
        let PollOutcome::NewFrame(g) = p.poll_once(t0 - chrono::Duration::seconds(5)).await.unwrap() else {
            panic!()
        };
        assert_eq!(g.captured_at, t0);
        assert_eq!(p.poll_once(t0).await.unwrap(), PollOutcome::Exhausted);
    }

    #[tokio::test]
    async fn failures_back_off_and_degrade() {
        // Port 9 (discard) on localhost is closed in the test environment.
        let mut p = Poller::new(
            camera(FrameSourceKind::Url("http://127.0.0.1:9/frame.png".into())),
            reqwest::Client::new(),
            3,
            10.0,
        )
        .unwrap();
        assert_eq!(p.next_delay(), Duration::from_secs(2));
        let mut delays = Vec::new();
        for _ in 0..4 {
            assert!(p.poll_once(Utc::now()).await.is_err());
            delays.push(p.next_delay().as_secs_f64());
            if p.consecutive_failures() < 3 {
                assert_eq!(p.health(), Health::Healthy);
            }
        }
        assert_eq!(delays, vec![4.0, 8.0, 10.0, 10.0]);
        assert_eq!(p.health(), Health::Degraded);
    }
}
