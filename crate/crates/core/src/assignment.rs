//! Training sample selection.
//!
//! Every location strictly inside a ground-truth box is a candidate. Each
//! candidate is scored by `IoU(predicted box, gt) * confidence`; candidates
//! scoring at least `mean + std` of all scores for that box become positives,
//! and the rest are ignored rather than treated as negatives. Locations outside
//! every box are negatives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{decode_box, iou, BoundingBox, GridLocation, RegressionVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("no location lies strictly inside the ground-truth box")]
    NoCandidates,
    #[error("{predictions} predictions for {locations} locations")]
    Misaligned { locations: usize, predictions: usize },
    #[error("k must be at least 1")]
    InvalidK,
}

/// A location inside a ground-truth box together with its current prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateSample {
    pub location: GridLocation,
    /// Index of the location in the full location list.
    pub index: usize,
    pub confidence: f64,
    pub predicted_box: BoundingBox,
    pub iou: f64,
    pub score: f64,
}

impl CandidateSample {
    pub fn new(
        location: GridLocation,
        index: usize,
        confidence: f64,
        predicted_box: BoundingBox,
        gt: &BoundingBox,
    ) -> Self {
        let iou = iou(&predicted_box, gt);
        Self {
            location,
            index,
            confidence,
            predicted_box,
            iou,
            score: sample_score(iou, confidence),
        }
    }
}

/// `IoU * confidence`.
pub fn sample_score(iou: f64, confidence: f64) -> f64 {
    iou * confidence
}

/// Locations strictly inside `gt`, in input order. May be empty for boxes that
/// fall between cell centers.
pub fn candidate_points(gt: &BoundingBox, locations: &[GridLocation]) -> Vec<GridLocation> {
    candidate_indices(gt, locations)
        .into_iter()
        .map(|i| locations[i])
        .collect()
}

pub fn candidate_indices(gt: &BoundingBox, locations: &[GridLocation]) -> Vec<usize> {
    locations
        .iter()
        .enumerate()
        .filter(|(_, l)| gt.contains_strictly(l.x(), l.y()))
        .map(|(i, _)| i)
        .collect()
}

/// `mean + population std`. The sum runs over sorted values, so the result
/// does not depend on input order, and equal values give exactly that value.
pub fn mean_plus_std(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return sorted[0];
    }
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    mean + var.sqrt()
}

/// Selection made for one ground-truth box; all entries are location indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSelection {
    pub positives: Vec<usize>,
    pub ignored: Vec<usize>,
    /// Candidates the scheme turns into negatives (only the ATSS baseline does).
    pub negatives: Vec<usize>,
    pub threshold: f64,
}

fn distance_to_center(loc: &GridLocation, gt: &BoundingBox) -> f64 {
    let (cx, cy) = gt.center();
    (loc.x() - cx).hypot(loc.y() - cy)
}

/// Orders by distance to the box center, then row-major.
fn closer_to_center(a: &GridLocation, b: &GridLocation, gt: &BoundingBox) -> std::cmp::Ordering {
    distance_to_center(a, gt)
        .total_cmp(&distance_to_center(b, gt))
        .then((a.iy(), a.ix()).cmp(&(b.iy(), b.ix())))
}

/// Score-threshold selection for a single box.
///
/// If no candidate reaches the threshold, the best-scoring one is promoted
/// (ties go to the candidate nearest the box center, then row-major order).
pub fn modified_atss(candidates: &[CandidateSample], gt: &BoundingBox) -> Result<BoxSelection, AssignError> {
    if candidates.is_empty() {
        return Err(AssignError::NoCandidates);
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    let threshold = mean_plus_std(&scores);
    let mut positives: Vec<usize> = candidates
        .iter()
        .filter(|c| c.score >= threshold)
        .map(|c| c.index)
        .collect();
    if positives.is_empty() {
        let best = candidates
            .iter()
            .min_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| closer_to_center(&a.location, &b.location, gt))
            })
            .expect("non-empty");
        positives.push(best.index);
    }
    positives.sort_unstable();
    let mut ignored: Vec<usize> = candidates
        .iter()
        .map(|c| c.index)
        .filter(|i| positives.binary_search(i).is_err())
        .collect();
    ignored.sort_unstable();
    Ok(BoxSelection {
        positives,
        ignored,
        negatives: Vec::new(),
        threshold,
    })
}

/// Point-adapted ATSS: keep the `k` candidates nearest the box center and
/// threshold their IoU at `mean + std`. Candidates that miss become negatives.
pub fn original_atss_baseline(
    candidates: &[CandidateSample],
    gt: &BoundingBox,
    k: usize,
) -> Result<BoxSelection, AssignError> {
    if k == 0 {
        return Err(AssignError::InvalidK);
    }
    if candidates.is_empty() {
        return Err(AssignError::NoCandidates);
    }
    let mut nearest: Vec<&CandidateSample> = candidates.iter().collect();
    nearest.sort_by(|a, b| closer_to_center(&a.location, &b.location, gt));
    nearest.truncate(k);
    let ious: Vec<f64> = nearest.iter().map(|c| c.iou).collect();
    let threshold = mean_plus_std(&ious);
    let mut positives: Vec<usize> = nearest
        .iter()
        .filter(|c| c.iou >= threshold && gt.contains_strictly(c.location.x(), c.location.y()))
        .map(|c| c.index)
        .collect();
    positives.sort_unstable();
    let mut negatives: Vec<usize> = candidates
        .iter()
        .map(|c| c.index)
        .filter(|i| positives.binary_search(i).is_err())
        .collect();
    negatives.sort_unstable();
    Ok(BoxSelection {
        positives,
        ignored: Vec::new(),
        negatives,
        threshold,
    })
}

/// Warm-up selection: inside locations within `radius_strides * stride` of the
/// box center (per axis) are positive, other inside locations are ignored. If
/// none is close enough, the nearest inside location is promoted.
pub fn center_sampling(
    inside: &[(usize, GridLocation)],
    gt: &BoundingBox,
    radius_strides: f64,
) -> Result<BoxSelection, AssignError> {
    if inside.is_empty() {
        return Err(AssignError::NoCandidates);
    }
    let (cx, cy) = gt.center();
    let mut positives: Vec<usize> = inside
        .iter()
        .filter(|(_, l)| {
            let r = radius_strides * l.stride() as f64;
            (l.x() - cx).abs() <= r && (l.y() - cy).abs() <= r
        })
        .map(|(i, _)| *i)
        .collect();
    if positives.is_empty() {
        let (i, _) = inside
            .iter()
            .min_by(|a, b| closer_to_center(&a.1, &b.1, gt))
            .expect("non-empty");
        positives.push(*i);
    }
    positives.sort_unstable();
    let mut ignored: Vec<usize> = inside
        .iter()
        .map(|(i, _)| *i)
        .filter(|i| positives.binary_search(i).is_err())
        .collect();
    ignored.sort_unstable();
    Ok(BoxSelection {
        positives,
        ignored,
        negatives: Vec::new(),
        threshold: f64::NAN,
    })
}

/// Current model output at one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationPrediction {
    /// Classification probability (post-sigmoid).
    pub confidence: f64,
    pub regression: RegressionVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignMode {
    /// Score-based selection from live predictions.
    Atss,
    /// Center sampling, used while predictions are still uninformative.
    CenterSampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocationRole {
    Positive { gt: usize },
    Ignored,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// One role per location, aligned with the input locations.
    pub roles: Vec<LocationRole>,
    /// Per-box threshold (`None` for boxes without candidates or in warm-up).
    pub thresholds: Vec<Option<f64>>,
    /// Boxes with no location strictly inside them.
    pub unassigned: Vec<usize>,
}

impl AssignmentResult {
    fn indices(&self, pred: impl Fn(&LocationRole) -> bool) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.indices(|r| matches!(r, LocationRole::Positive { .. }))
    }

    pub fn ignored(&self) -> Vec<usize> {
        self.indices(|r| *r == LocationRole::Ignored)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(|r| *r == LocationRole::Negative)
    }

    pub fn n_pos(&self) -> usize {
        self.roles
            .iter()
            .filter(|r| matches!(r, LocationRole::Positive { .. }))
            .count()
    }
}

/// Builds the candidate list for `gt` from live predictions.
pub fn build_candidates(
    gt: &BoundingBox,
    locations: &[GridLocation],
    predictions: &[LocationPrediction],
    image_size: Option<(f64, f64)>,
) -> Vec<CandidateSample> {
    candidate_indices(gt, locations)
        .into_iter()
        .filter_map(|i| {
            let loc = locations[i];
            let pred = &predictions[i];
            // Activated regressions are positive; a non-positive one is simply
            // not a usable candidate.
            let pbox = decode_box(&loc, &pred.regression, image_size).ok()?;
            Some(CandidateSample::new(loc, i, pred.confidence, pbox, gt))
        })
        .collect()
}

/// Assigns every location for an image with any number of boxes.
///
/// A location selected by several boxes goes to the smallest one; a location
/// selected by one box and ignored by another stays positive.
pub fn assign(
    locations: &[GridLocation],
    gts: &[BoundingBox],
    predictions: &[LocationPrediction],
    image_size: Option<(f64, f64)>,
    mode: AssignMode,
) -> Result<AssignmentResult, AssignError> {
    if locations.len() != predictions.len() {
        return Err(AssignError::Misaligned {
            locations: locations.len(),
            predictions: predictions.len(),
        });
    }
    let mut best_positive: Vec<Option<usize>> = vec![None; locations.len()];
    let mut inside_any = vec![false; locations.len()];
    let mut thresholds = Vec::with_capacity(gts.len());
    let mut unassigned = Vec::new();

    for (g, gt) in gts.iter().enumerate() {
        let selection = match mode {
            AssignMode::Atss => {
                let candidates = build_candidates(gt, locations, predictions, image_size);
                modified_atss(&candidates, gt)
            }
            AssignMode::CenterSampling => {
                let inside: Vec<(usize, GridLocation)> = candidate_indices(gt, locations)
                    .into_iter()
                    .map(|i| (i, locations[i]))
                    .collect();
                center_sampling(&inside, gt, 1.5)
            }
        };
        let selection = match selection {
            Ok(s) => s,
            Err(AssignError::NoCandidates) => {
                unassigned.push(g);
                thresholds.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        thresholds.push(selection.threshold.is_finite().then_some(selection.threshold));
        for &i in selection.positives.iter().chain(&selection.ignored) {
            inside_any[i] = true;
        }
        for &i in &selection.positives {
            let replace = match best_positive[i] {
                None => true,
                Some(prev) => gt.area() < gts[prev].area(),
            };
            if replace {
                best_positive[i] = Some(g);
            }
        }
    }

    let roles = best_positive
        .iter()
        .zip(&inside_any)
        .map(|(best, &inside)| match (best, inside) {
            (Some(g), _) => LocationRole::Positive { gt: *g },
            (None, true) => LocationRole::Ignored,
            (None, false) => LocationRole::Negative,
        })
        .collect();
    Ok(AssignmentResult {
        roles,
        thresholds,
        unassigned,
    })
}
