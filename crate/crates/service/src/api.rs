//! Operator REST API and live event stream.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, watch};
use tokio_stream::wrappers::BroadcastStream;
use tower_http::cors::CorsLayer;

use crate::alert::{Alert, AlertState, Decision};
use crate::config::CameraSource;
use crate::engine::{Engine, EngineError};
use crate::eventlog::Health;
use crate::snapshots::SnapshotStore;

#[derive(Debug, Default)]
pub struct Counters {
    pub frames_polled: AtomicU64,
    pub frames_duplicate: AtomicU64,
    pub frames_processed: AtomicU64,
    pub frames_rejected: AtomicU64,
    pub poll_failures: AtomicU64,
    pub last_latency_ms: AtomicU64,
    pub over_budget: AtomicU64,
}

impl Counters {
    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self, dropped: u64) -> serde_json::Value {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        json!({
            "frames_polled": g(&self.frames_polled),
            "frames_duplicate": g(&self.frames_duplicate),
            "frames_processed": g(&self.frames_processed),
            "frames_rejected": g(&self.frames_rejected),
            "frames_dropped": dropped,
            "poll_failures": g(&self.poll_failures),
            "last_latency_ms": g(&self.last_latency_ms),
            "over_budget": g(&self.over_budget),
        })
    }
}

/// Poller-side view of a camera, updated on every poll.
#[derive(Debug, Clone, Serialize)]
pub struct CameraLive {
    pub health: Health,
    pub consecutive_failures: u32,
    pub last_poll_at: Option<DateTime<Utc>>,
    pub last_error: Option<String>,
}

impl Default for CameraLive {
    fn default() -> Self {
        Self {
            health: Health::Healthy,
            consecutive_failures: 0,
            last_poll_at: None,
            last_error: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Mutex<Engine>>,
    pub snapshots: SnapshotStore,
    pub cameras: Arc<Vec<CameraSource>>,
    pub live: Arc<Mutex<HashMap<String, CameraLive>>>,
    pub counters: Arc<Counters>,
    pub dropped: Arc<dyn Fn() -> u64 + Send + Sync>,
    pub operator_token: Option<String>,
    pub dispatch_tx: mpsc::UnboundedSender<String>,
    pub started: Instant,
    /// Flips to `true` on shutdown so open event streams end.
    pub stopping: watch::Receiver<bool>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::NotFound(_) => StatusCode::NOT_FOUND,
            EngineError::InvalidTransition(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/cameras", get(cameras))
        .route("/alerts", get(list_alerts))
        .route("/alerts/{id}", get(get_alert))
        .route("/alerts/{id}/frame", get(alert_frame))
        .route("/alerts/{id}/confirm", post(confirm))
        .route("/alerts/{id}/reject", post(reject))
        .route("/events/stream", get(stream))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let live = s.live.lock().expect("live lock").clone();
    let degraded = live.values().any(|c| c.health == Health::Degraded);
    let cameras: Vec<_> = s
        .cameras
        .iter()
        .map(|c| {
            let l = live.get(&c.id).cloned().unwrap_or_default();
            json!({"id": c.id, "health": l.health, "consecutive_failures": l.consecutive_failures})
        })
        .collect();
    let last_seq = s.engine.lock().expect("engine lock").state().last_seq;
    Json(json!({
        "status": if degraded { "degraded" } else { "ok" },
        "uptime_secs": s.started.elapsed().as_secs_f64(),
        "last_seq": last_seq,
        "counters": s.counters.snapshot((s.dropped)()),
        "cameras": cameras,
    }))
}

async fn cameras(State(s): State<AppState>) -> Json<Vec<serde_json::Value>> {
    let live = s.live.lock().expect("live lock").clone();
    let state = s.engine.lock().expect("engine lock").state().cameras.clone();
    Json(
        s.cameras
            .iter()
            .map(|c| {
                let l = live.get(&c.id).cloned().unwrap_or_default();
                let st = state.get(&c.id).cloned().unwrap_or_default();
                json!({
                    "id": c.id,
                    "source": c.source,
                    "poll_interval_secs": c.poll_interval_secs,
                    "enabled": c.enabled,
                    "health": l.health,
                    "consecutive_failures": l.consecutive_failures,
                    "last_poll_at": l.last_poll_at,
                    "last_error": l.last_error,
                    "frames": st.frames,
                    "rejected": st.rejected,
                    "last_frame_at": st.last_frame_at,
                    "last_sha256": st.last_sha256,
                })
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct AlertQuery {
    state: Option<String>,
}

async fn list_alerts(State(s): State<AppState>, Query(q): Query<AlertQuery>) -> Result<Json<Vec<Alert>>, ApiError> {
    let filter = q
        .state
        .map(|v| v.parse::<AlertState>())
        .transpose()
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e))?;
    Ok(Json(s.engine.lock().expect("engine lock").state().alerts_sorted(filter)))
}

fn find_alert(s: &AppState, id: &str) -> Result<Alert, ApiError> {
    s.engine
        .lock()
        .expect("engine lock")
        .state()
        .alert(id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown alert `{id}`")))
}

async fn get_alert(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Alert>, ApiError> {
    find_alert(&s, &id).map(Json)
}

/// Snapshot image of the triggering frame; boxes travel in headers.
async fn alert_frame(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let alert = find_alert(&s, &id)?;
    let bytes = s
        .snapshots
        .get(&alert.snapshot_sha256)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "snapshot missing".into()))?;
    let mime = image::guess_format(&bytes)
        .map(|f| f.to_mime_type())
        .unwrap_or("application/octet-stream");
    let boxes = serde_json::to_string(&alert.boxes).expect("boxes serialise");
    let mut headers = HeaderMap::new();
    let mut set = |name: &'static str, value: String| {
        headers.insert(name, HeaderValue::from_str(&value).expect("ASCII header value"));
    };
    set("content-type", mime.to_string());
    set("x-smokewatch-boxes", boxes);
    set("x-snapshot-sha256", alert.snapshot_sha256.clone());
    set("x-frame-width", alert.frame_width.to_string());
    set("x-frame-height", alert.frame_height.to_string());
    headers.insert(
        header::ACCESS_CONTROL_EXPOSE_HEADERS,
        HeaderValue::from_static("x-smokewatch-boxes, x-snapshot-sha256, x-frame-width, x-frame-height"),
    );
    Ok((headers, bytes).into_response())
}

#[derive(Deserialize)]
struct DecisionBody {
    operator_id: String,
}

fn authorize(s: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &s.operator_token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError(StatusCode::UNAUTHORIZED, "missing or wrong operator token".into()))
    }
}

fn decide(s: &AppState, headers: &HeaderMap, id: &str, decision: Decision, body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>) -> Result<Json<Alert>, ApiError> {
    authorize(s, headers)?;
    let Json(body) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    if body.operator_id.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "operator_id must not be empty".into()));
    }
    let alert = s
        .engine
        .lock()
        .expect("engine lock")
        .decide(id, decision, &body.operator_id, Utc::now())?;
    if decision == Decision::Confirm {
        // The dispatcher task owns delivery; a closed channel means shutdown.
        let _ = s.dispatch_tx.send(alert.id.clone());
    }
    Ok(Json(alert))
}

async fn confirm(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Alert>, ApiError> {
    decide(&s, &headers, &id, Decision::Confirm, body)
}

async fn reject(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Alert>, ApiError> {
    decide(&s, &headers, &id, Decision::Reject, body)
}

/// One JSON message per alert event or camera health change. Slow clients
/// that fall behind skip the missed messages and should resync via `/alerts`.
async fn stream(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let rx = s.engine.lock().expect("engine lock").subscribe();
    let events = BroadcastStream::new(rx).filter_map(|msg| async move {
        let msg = msg.ok()?;
        let data = serde_json::to_string(&msg).ok()?;
        Some(Ok(SseEvent::default().id(msg.seq.to_string()).data(data)))
    });
    let mut stopping = s.stopping.clone();
    let events = events.take_until(async move {
        let _ = stopping.wait_for(|s| *s).await;
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}
