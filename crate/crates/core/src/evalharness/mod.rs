//! Evaluation arithmetic: image-level confusion metrics, time-to-detect
//! reports and model-versus-human latency comparison. The [`synth`] module
//! generates the synthetic smoke corpus.

pub mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{detections} detection lists for {labels} labels")]
    LengthMismatch { detections: usize, labels: usize },
    #[error("no events to report on")]
    Empty,
    #[error("event `{0}` is detected before it starts")]
    NegativeDelay(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Adds one image with its ground-truth label and predicted label.
    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

/// Image-level counts: an image is predicted smoke iff it has at least one
/// detection scoring `>= score_thresh`.
pub fn confusion_counts(
    detections: &[Vec<Detection>],
    labels: &[bool],
    score_thresh: f64,
) -> Result<ConfusionCounts, EvalError> {
    if detections.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            detections: detections.len(),
            labels: labels.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (dets, &label) in detections.iter().zip(labels) {
        c.record(label, dets.iter().any(|d| d.score >= score_thresh));
    }
    Ok(c)
}

/// Rates derived from [`ConfusionCounts`]; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        tpr: ratio(c.tp, c.tp + c.fn_),
        fpr: ratio(c.fp, c.fp + c.tn),
    }
}

/// Cuts `x` to three decimals, the way the published table reports rates.
pub fn truncate3(x: f64) -> f64 {
    // The epsilon keeps exact thousandths such as 0.829 from dropping to 0.828.
    ((x * 1000.0) + 1e-9).floor() / 1000.0
}

impl Metrics {
    /// Every defined rate truncated to three decimals.
    pub fn truncated(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy.map(truncate3),
            precision: self.precision.map(truncate3),
            tpr: self.tpr.map(truncate3),
            fpr: self.fpr.map(truncate3),
        }
    }

    /// Human-readable table; undefined rates print as `n/a`.
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        format!(
            "accuracy   {}\nprecision  {}\ntpr        {}\nfpr        {}\n",
            f(self.accuracy),
            f(self.precision),
            f(self.tpr),
            f(self.fpr)
        )
    }
}

/// Smoke start and first detection of one event, in seconds since any epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDelay {
    pub event_id: String,
    pub smoke_start: f64,
    /// `None` when the event was missed within the observation horizon.
    pub detected_at: Option<f64>,
}

impl DetectionDelay {
    pub fn new(event_id: impl Into<String>, smoke_start: f64, detected_at: Option<f64>) -> Result<Self, EvalError> {
        let event_id = event_id.into();
        if detected_at.is_some_and(|d| !(d >= smoke_start)) {
            return Err(EvalError::NegativeDelay(event_id));
        }
        Ok(Self {
            event_id,
            smoke_start,
            detected_at,
        })
    }

    /// Event with start at 0 and the given delay.
    pub fn after(event_id: impl Into<String>, delay: f64) -> Result<Self, EvalError> {
        Self::new(event_id, 0.0, Some(delay))
    }

    pub fn delay(&self) -> Option<f64> {
        self.detected_at.map(|d| d - self.smoke_start)
    }
}

/// Upper bounds of the report buckets in seconds; the last bucket is open.
pub const DELAY_BUCKETS: [f64; 3] = [60.0, 180.0, 300.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayBucket {
    pub label: String,
    /// `None` for the open-ended bucket.
    pub bound_seconds: Option<f64>,
    /// Cumulative percentage of detected events with delay within the bound.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeToDetectReport {
    pub buckets: Vec<DelayBucket>,
    pub detected: usize,
    pub missed: usize,
}

impl TimeToDetectReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        for b in &self.buckets {
            out.push_str(&format!("{:<12} {:>6.1}%\n", b.label, b.percent));
        }
        out.push_str(&format!("detected {} missed {}\n", self.detected, self.missed));
        out
    }
}

/// Cumulative detection percentages at 60 s, 3 min, 5 min and beyond, over
/// the detected events.
pub fn time_to_detect_report(delays: &[DetectionDelay]) -> Result<TimeToDetectReport, EvalError> {
    let detected: Vec<f64> = delays.iter().filter_map(DetectionDelay::delay).collect();
    if detected.is_empty() {
        return Err(EvalError::Empty);
    }
    let pct = |n: usize| 100.0 * n as f64 / detected.len() as f64;
    let labels = ["<= 60 s", "<= 3 min", "<= 5 min"];
    let mut buckets: Vec<DelayBucket> = DELAY_BUCKETS
        .iter()
        .zip(labels)
        .map(|(&bound, label)| DelayBucket {
            label: label.to_string(),
            bound_seconds: Some(bound),
            percent: pct(detected.iter().filter(|&&d| d <= bound).count()),
        })
        .collect();
    buckets.push(DelayBucket {
        label: "any".to_string(),
        bound_seconds: None,
        percent: 100.0,
    });
    Ok(TimeToDetectReport {
        buckets,
        detected: detected.len(),
        missed: delays.len() - detected.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Advantage {
    /// Mean of `human delay - model delay` in seconds; positive means the
    /// model is faster. `None` if no event pairs up.
    pub mean_seconds: Option<f64>,
    pub paired: usize,
    /// Events present in only one list or missed by either side.
    pub unpaired: usize,
}

/// Mean detection advantage of the model over humans, paired by event id.
pub fn mean_detection_advantage(model: &[DetectionDelay], human: &[DetectionDelay]) -> Advantage {
    let human_by_id: HashMap<&str, &DetectionDelay> = human.iter().map(|d| (d.event_id.as_str(), d)).collect();
    let mut sum = 0.0;
    let mut paired = 0;
    let mut matched_ids = 0;
    for m in model {
        let Some(h) = human_by_id.get(m.event_id.as_str()) else {
            continue;
        };
        matched_ids += 1;
        if let (Some(md), Some(hd)) = (m.delay(), h.delay()) {
            sum += hd - md;
            paired += 1;
        }
    }
    let unpaired = model.len() + human.len() - 2 * matched_ids + (matched_ids - paired);
    Advantage {
        mean_seconds: (paired > 0).then(|| sum / paired as f64),
        paired,
        unpaired,
    }
}
