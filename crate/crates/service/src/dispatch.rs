//! Webhook notification of confirmed alerts.

use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::alert::{Alert, BoxScore, DispatchOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub alert_id: String,
    pub camera_id: String,
    pub first_seen_utc: String,
    pub boxes: Vec<BoxScore>,
    pub snapshot_sha256: String,
}

impl WebhookPayload {
    pub fn for_alert(alert: &Alert) -> Self {
        Self {
            alert_id: alert.id.clone(),
            camera_id: alert.camera_id.clone(),
            first_seen_utc: format_utc(alert.first_seen),
            boxes: alert.boxes.clone(),
            snapshot_sha256: alert.snapshot_sha256.clone(),
        }
    }
}

pub fn format_utc(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone)]
pub struct Dispatcher {
    client: reqwest::Client,
    endpoints: Vec<String>,
    attempts: u32,
    retry_pause: Duration,
}

impl Dispatcher {
    pub fn new(endpoints: Vec<String>, attempts: u32, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("HTTP client builds");
        Self {
            client,
            endpoints,
            attempts: attempts.max(1),
            retry_pause: Duration::from_millis(200),
        }
    }

    pub fn with_retry_pause(mut self, pause: Duration) -> Self {
        self.retry_pause = pause;
        self
    }

    pub fn endpoints(&self) -> &[String] {
        &self.endpoints
    }

    async fn post_once(&self, endpoint: &str, payload: &WebhookPayload) -> Result<(), String> {
        let resp = self
            .client
            .post(endpoint)
            .json(payload)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("HTTP {}", resp.status().as_u16()))
        }
    }

    /// Posts the payload to every endpoint, each with up to `attempts` tries.
    pub async fn notify(&self, payload: &WebhookPayload) -> Vec<DispatchOutcome> {
        let mut outcomes = Vec::with_capacity(self.endpoints.len());
        for endpoint in &self.endpoints {
            let mut last_error = None;
            let mut attempts = 0;
            while attempts < self.attempts {
                attempts += 1;
                match self.post_once(endpoint, payload).await {
                    Ok(()) => {
                        last_error = None;
                        break;
                    }
                    Err(e) => {
                        tracing::warn!(endpoint, attempt = attempts, error = %e, "webhook failed");
                        last_error = Some(e);
                        if attempts < self.attempts {
                            tokio::time::sleep(self.retry_pause * attempts).await;
                        }
                    }
                }
            }
            outcomes.push(DispatchOutcome {
                endpoint: endpoint.clone(),
                ok: last_error.is_none(),
                attempts,
                error: last_error,
            });
        }
        outcomes
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::Router;
    use chrono::TimeZone;

    use super::*;

    fn payload() -> WebhookPayload {
        WebhookPayload {
            alert_id: "alert-000004".into(),
            camera_id: "ridge".into(),
            first_seen_utc: format_utc(Utc.with_ymd_and_hms(2026, 7, 1, 14, 3, 9).unwrap()),
            boxes: vec![BoxScore { x0: 1.0, y0: 2.0, x1: 30.5, y1: 40.0, score: 0.75 }],
            snapshot_sha256: "ab".repeat(32),
        }
    }

    /// Endpoint that fails its first `failures` calls, then succeeds.
    async fn flaky(failures: u32) -> (String, Arc<AtomicU32>) {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let app = Router::new().route(
            "/",
            post(move || {
                let n = seen.fetch_add(1, Ordering::SeqCst);
                async move {
                    if n < failures {
                        StatusCode::BAD_GATEWAY
                    } else {
                        StatusCode::NO_CONTENT
                    }
                }
            }),
        );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        (url, calls)
    }

    #[test]
    fn payload_shape() {
        let v = serde_json::to_value(payload()).unwrap();
        assert_eq!(v["first_seen_utc"], "2026-07-01T14:03:09.000Z");
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        assert_eq!(v["boxes"][0]["x1"], 30.5);
    }

    #[tokio::test]
    async fn retries_then_reports_per_endpoint() {
        let (good, good_calls) = flaky(1).await;
        let (bad, bad_calls) = flaky(u32::MAX).await;
        let d = Dispatcher::new(vec![good.clone(), bad.clone()], 3, Duration::from_secs(2))
            .with_retry_pause(Duration::from_millis(1));
        let out = d.notify(&payload()).await;
        assert_eq!(out.len(), 2);
        assert!(out[0].ok);
        assert_eq!(out[0].attempts, 2);
        assert!(!out[1].ok);
        assert_eq!(out[1].attempts, 3);
        assert_eq!(out[1].error.as_deref(), Some("HTTP 502"));
        assert_eq!(good_calls.load(Ordering::SeqCst), 2);
        assert_eq!(bad_calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn unreachable_endpoint_fails() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let d = Dispatcher::new(vec![url], 2, Duration::from_secs(1)).with_retry_pause(Duration::from_millis(1));
        let out = d.notify(&payload()).await;
        assert!(!out[0].ok);
        assert_eq!(out[0].attempts, 2);
        assert!(out[0].error.is_some());
    }
}
