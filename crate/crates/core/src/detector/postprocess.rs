use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::PredictionMaps;
use crate::geometry::{decode_box, iou, BoundingBox, GridLocation};
use crate::neuralops::{sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// `sigmoid(class logit) * sigmoid(centerness logit)`.
    pub score: f64,
    pub location: GridLocation,
}

/// Descending score, then ascending `x0`, `y0`, `x1`, `y1`.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x0().total_cmp(&b.bbox.x0()))
        .then(a.bbox.y0().total_cmp(&b.bbox.y0()))
        .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
        .then(a.bbox.y1().total_cmp(&b.bbox.y1()))
}

/// Greedy non-maximum suppression: keeps the best remaining detection and
/// drops every other one overlapping it with IoU >= `iou_thresh`.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(rank);
    let mut suppressed = vec![false; sorted.len()];
    let mut kept = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(sorted[i]);
        for j in i + 1..sorted.len() {
            if !suppressed[j] && iou(&sorted[i].bbox, &sorted[j].bbox) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

pub(super) fn detections_from_maps<T: Real>(
    maps: &PredictionMaps<T>,
    n: usize,
    score_thresh: f64,
    nms_thresh: f64,
) -> Vec<Detection> {
    let (w, h) = maps.image_size;
    let bounds = Some((w as f64, h as f64));
    let cls = maps.cls_logits.plane(n, 0);
    let ctr = maps.ctr_logits.plane(n, 0);
    let candidates: Vec<Detection> = maps
        .locations()
        .into_iter()
        .enumerate()
        .filter_map(|(i, location)| {
            let score = sigmoid(cls[i].as_f64()) * sigmoid(ctr[i].as_f64());
            if !(score >= score_thresh) {
                return None;
            }
            let v = maps.regression_at(n, i);
            let bbox = decode_box(&location, &v, bounds).ok()?;
            Some(Detection {
                bbox,
                score,
                location,
            })
        })
        .collect();
    nms(&candidates, nms_thresh)
}
