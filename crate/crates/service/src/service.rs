//! Wiring: pollers, queue, detection workers, dispatcher and the API server.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use smokewatch_core::detector::{load_model, CheckpointError};
use smokewatch_core::Detector;
use thiserror::Error;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::api::{router, AppState, CameraLive, Counters};
use crate::config::ServiceConfig;
use crate::dispatch::{Dispatcher, WebhookPayload};
use crate::engine::{Engine, FrameReport};
use crate::eventlog::LogError;
use crate::poller::{PollOutcome, Poller};
use crate::queue::{Frame, FrameQueue};
use crate::snapshots::SnapshotStore;
use crate::state::ServiceState;
use crate::worker::analyse_frame;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("loading detector: {0}")]
    Model(#[from] CheckpointError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// A running service. Dropping it without [`ServiceHandle::shutdown`] leaves
/// the tasks running until the runtime stops.
pub struct ServiceHandle {
    addr: SocketAddr,
    state: AppState,
    queue: Arc<FrameQueue>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Copy of the current in-memory state.
    pub fn snapshot(&self) -> ServiceState {
        self.state.engine.lock().expect("engine lock").state().clone()
    }

    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        self.queue.close();
        for t in self.tasks {
            let _ = t.await;
        }
    }

    /// Resolves when the service is asked to stop via Ctrl-C.
    pub async fn run_until_ctrl_c(self) {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
        self.shutdown().await;
    }
}

/// Loads the configured checkpoint and starts the service.
pub async fn start(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let model = load_model(&config.checkpoint)?;
    start_with_model(config, Arc::new(model)).await
}

pub async fn start_with_model(config: ServiceConfig, model: Arc<Detector<f32>>) -> Result<ServiceHandle, ServiceError> {
    std::fs::create_dir_all(&config.data_dir)?;
    let engine = Engine::open(
        config.data_dir.join(LOG_FILE),
        config.debounce_frames,
        config.suppression_window_secs,
    )?;
    let snapshots = SnapshotStore::open(config.data_dir.join(SNAPSHOT_DIR))?;
    let queue = Arc::new(FrameQueue::new(config.queue_capacity));
    let (dispatch_tx, dispatch_rx) = mpsc::unbounded_channel();
    let (shutdown, shutdown_rx) = watch::channel(false);
    let queue_for_count = queue.clone();
    let state = AppState {
        engine: Arc::new(Mutex::new(engine)),
        snapshots,
        cameras: Arc::new(config.cameras.clone()),
        live: Arc::new(Mutex::new(HashMap::new())),
        counters: Arc::new(Counters::default()),
        dropped: Arc::new(move || queue_for_count.dropped()),
        operator_token: config.operator_token.clone(),
        dispatch_tx,
        started: Instant::now(),
        stopping: shutdown_rx.clone(),
    };

    let listener = tokio::net::TcpListener::bind((config.api_host.as_str(), config.api_port)).await?;
    let addr = listener.local_addr()?;
    let mut tasks = Vec::new();
    let app = router(state.clone());
    let mut stop = shutdown_rx.clone();
    tasks.push(tokio::spawn(async move {
        let served = axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = stop.wait_for(|s| *s).await;
            })
            .await;
        if let Err(e) = served {
            tracing::error!(error = %e, "API server stopped");
        }
    }));

    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .expect("HTTP client builds");
    for camera in config.cameras.iter().filter(|c| c.enabled) {
        let poller = Poller::new(camera.clone(), client.clone(), config.degraded_after, config.max_backoff_secs)?;
        tasks.push(tokio::spawn(poll_loop(poller, queue.clone(), state.clone(), shutdown_rx.clone())));
    }
    for _ in 0..config.workers {
        tasks.push(tokio::spawn(detect_loop(
            queue.clone(),
            state.clone(),
            model.clone(),
            config.clone(),
        )));
    }
    let dispatcher = Dispatcher::new(
        config.webhooks.clone(),
        config.webhook_attempts,
        Duration::from_secs_f64(config.webhook_timeout_secs),
    );
    tasks.push(tokio::spawn(dispatch_loop(
        dispatcher,
        dispatch_rx,
        state.clone(),
        Duration::from_secs_f64(config.dispatch_sweep_secs),
        shutdown_rx,
    )));
    tracing::info!(%addr, cameras = config.cameras.len(), "service started");
    Ok(ServiceHandle {
        addr,
        state,
        queue,
        shutdown,
        tasks,
    })
}

async fn poll_loop(mut poller: Poller, queue: Arc<FrameQueue>, state: AppState, mut stop: watch::Receiver<bool>) {
    let id = poller.camera().id.clone();
    loop {
        let now = Utc::now();
        let result = poller.poll_once(now).await;
        let mut last_error = None;
        match result {
            Ok(PollOutcome::NewFrame(frame)) => {
                Counters::bump(&state.counters.frames_polled);
                if let Some(evicted) = queue.push(frame) {
                    tracing::warn!(camera = %evicted.camera_id, "queue full, dropped a frame");
                }
            }
            Ok(PollOutcome::Duplicate) => Counters::bump(&state.counters.frames_duplicate),
            Ok(PollOutcome::Exhausted) => {}
            Err(e) => {
                Counters::bump(&state.counters.poll_failures);
                tracing::warn!(camera = %id, error = %e, "poll failed");
                last_error = Some(e.to_string());
            }
        }
        let health = poller.health();
        state.live.lock().expect("live lock").insert(
            id.clone(),
            CameraLive {
                health,
                consecutive_failures: poller.consecutive_failures(),
                last_poll_at: Some(now),
                last_error,
            },
        );
        let logged = state
            .engine
            .lock()
            .expect("engine lock")
            .record_health(&id, health, poller.consecutive_failures(), Utc::now());
        if let Err(e) = logged {
            tracing::error!(error = %e, "recording camera health");
        }
        tokio::select! {
            _ = tokio::time::sleep(poller.next_delay()) => {}
            _ = stop.wait_for(|s| *s) => return,
        }
    }
}

async fn detect_loop(queue: Arc<FrameQueue>, state: AppState, model: Arc<Detector<f32>>, config: ServiceConfig) {
    while let Some(frame) = queue.pop().await {
        let started = Instant::now();
        let Frame {
            camera_id,
            captured_at,
            bytes,
            sha256,
        } = frame;
        let m = model.clone();
        let (score, nms) = (config.score_thresh, config.nms_thresh);
        let (analysis, bytes) = match tokio::task::spawn_blocking(move || (analyse_frame(&m, &bytes, score, nms), bytes)).await {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(error = %e, "detection task panicked");
                continue;
            }
        };
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        state.counters.last_latency_ms.store(elapsed_ms as u64, std::sync::atomic::Ordering::Relaxed);
        if elapsed_ms > config.processing_budget_ms as f64 {
            Counters::bump(&state.counters.over_budget);
            tracing::warn!(camera = %camera_id, elapsed_ms, "frame over processing budget");
        }
        let result = match analysis {
            Err(e) => {
                Counters::bump(&state.counters.frames_rejected);
                tracing::warn!(camera = %camera_id, error = %e, "rejected undecodable frame");
                state.engine.lock().expect("engine lock").record_rejected_frame(
                    &camera_id,
                    captured_at,
                    &sha256,
                    &e.to_string(),
                    Utc::now(),
                )
            }
            Ok(analysis) => {
                Counters::bump(&state.counters.frames_processed);
                if !analysis.detections.is_empty() {
                    if let Err(e) = state.snapshots.put(&bytes) {
                        tracing::error!(error = %e, "storing snapshot");
                    }
                }
                let report = FrameReport {
                    camera_id: camera_id.clone(),
                    captured_at,
                    sha256,
                    width: analysis.width,
                    height: analysis.height,
                    detections: analysis.detections,
                    latency_ms: elapsed_ms,
                };
                let outcome = state.engine.lock().expect("engine lock").record_frame(report, Utc::now());
                outcome.map(|o| {
                    if let Some(id) = o.created {
                        tracing::info!(camera = %camera_id, alert = %id, "alert raised");
                    }
                })
            }
        };
        if let Err(e) = result {
            tracing::error!(error = %e, "recording frame");
        }
    }
}

async fn dispatch_loop(
    dispatcher: Dispatcher,
    mut rx: mpsc::UnboundedReceiver<String>,
    state: AppState,
    sweep_every: Duration,
    mut stop: watch::Receiver<bool>,
) {
    let mut sweep = tokio::time::interval(sweep_every);
    loop {
        let ids: Vec<String> = tokio::select! {
            Some(id) = rx.recv() => vec![id],
            _ = sweep.tick() => state
                .engine
                .lock()
                .expect("engine lock")
                .awaiting_dispatch()
                .into_iter()
                .map(|a| a.id)
                .collect(),
            _ = stop.wait_for(|s| *s) => return,
        };
        for id in ids {
            // Alerts are handled one at a time, so an alert is never in
            // flight twice; re-check that it still needs delivery.
            let alert = state.engine.lock().expect("engine lock").state().alert(&id).cloned();
            let Some(alert) = alert.filter(|a| a.state == crate::alert::AlertState::Confirmed) else {
                continue;
            };
            let outcomes = dispatcher.notify(&WebhookPayload::for_alert(&alert)).await;
            let recorded = state
                .engine
                .lock()
                .expect("engine lock")
                .record_dispatch(&id, outcomes, Utc::now());
            match recorded {
                Ok(a) => tracing::info!(alert = %id, state = %a.state, "dispatch recorded"),
                Err(e) => tracing::error!(alert = %id, error = %e, "recording dispatch"),
            }
        }
    }
}
