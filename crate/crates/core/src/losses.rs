//! Focal, IoU and centerness losses and the normalised composite.
//!
//! Scalar losses are evaluated in `f64` and return their derivative with
//! respect to the raw head output next to the value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RegressionVector;
use crate::neuralops::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{outputs} head outputs but {targets} targets")]
    Misaligned { outputs: usize, targets: usize },
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Sigmoid focal loss `-a_t (1 - p_t)^gamma ln(p_t)` and its derivative with
/// respect to `logit`.
pub fn focal_loss(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (z, sign, alpha_t) = if positive {
        (logit, 1.0, alpha)
    } else {
        (-logit, -1.0, 1.0 - alpha)
    };
    let p_t = sigmoid(z);
    let q = sigmoid(-z);
    // -ln(p_t)
    let nll = softplus(-z);
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = alpha_t * qg * nll;
    let dz = -alpha_t * qg * (gamma * p_t * nll + q);
    (loss, sign * dz)
}

/// `-ln IoU` of two boxes sharing an anchor point, and the gradient with
/// respect to the four components of `pred`.
pub fn iou_loss(pred: &RegressionVector, gt: &RegressionVector) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let g = gt.to_array();
    // Components are ordered l, t, r, b: even indices are horizontal.
    let pred_area = (p[0] + p[2]) * (p[1] + p[3]);
    let gt_area = (g[0] + g[2]) * (g[1] + g[3]);
    let iw = p[0].min(g[0]) + p[2].min(g[2]);
    let ih = p[1].min(g[1]) + p[3].min(g[3]);
    let inter = iw * ih;
    let union = pred_area + gt_area - inter;
    let iou = inter / union;
    if !(iou > 1e-8) {
        return (-(1e-8f64).ln(), [0.0; 4]);
    }
    let loss = -iou.ln();

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let horizontal = i % 2 == 0;
        let d_area = if horizontal { p[1] + p[3] } else { p[0] + p[2] };
        let d_inter = if p[i] < g[i] {
            if horizontal {
                ih
            } else {
                iw
            }
        } else {
            0.0
        };
        let d_union = d_area - d_inter;
        // d(-ln(inter/union)) = d_union/union - d_inter/inter
        grad[i] = d_union / union - d_inter / inter;
    }
    (loss, grad)
}

/// Binary cross-entropy between `sigmoid(logit)` and `target`.
pub fn centerness_loss(logit: f64, target: f64) -> (f64, f64) {
    (softplus(logit) - target * logit, sigmoid(logit) - target)
}

/// What a location should learn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SampleTarget {
    /// Outside every ground-truth box: classification target 0.
    Negative,
    /// Inside a box but not selected: excluded from every term.
    Ignored,
    /// Selected location: classification target 1 plus box and centerness.
    Positive {
        regression: RegressionVector,
        centerness: f64,
    },
}

impl SampleTarget {
    /// Ground-truth class label `c`, or `None` for ignored locations.
    pub fn label(&self) -> Option<u8> {
        match self {
            SampleTarget::Negative => Some(0),
            SampleTarget::Ignored => None,
            SampleTarget::Positive { .. } => Some(1),
        }
    }
}

/// Head output at one location. `regression` is already activated (positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub cls_logit: f64,
    pub regression: RegressionVector,
    pub ctr_logit: f64,
}

/// Gradient of the normalised total with respect to one [`HeadOutput`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadGrad {
    pub cls_logit: f64,
    pub regression: [f64; 4],
    pub ctr_logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub cen: f64,
    pub n_pos: usize,
    pub total: f64,
}

impl LossBreakdown {
    pub fn normaliser(&self) -> f64 {
        self.n_pos.max(1) as f64
    }
}

/// Sums classification loss over positives and negatives and box and
/// centerness losses over positives, then divides everything by
/// `max(n_pos, 1)`.
pub fn composite_loss(
    outputs: &[HeadOutput],
    targets: &[SampleTarget],
    focal: FocalParams,
) -> Result<(LossBreakdown, Vec<HeadGrad>), LossError> {
    if outputs.len() != targets.len() {
        return Err(LossError::Misaligned {
            outputs: outputs.len(),
            targets: targets.len(),
        });
    }
    let mut out = LossBreakdown::default();
    let mut grads = vec![HeadGrad::default(); outputs.len()];
    for ((o, t), g) in outputs.iter().zip(targets).zip(grads.iter_mut()) {
        match t {
            SampleTarget::Ignored => {}
            SampleTarget::Negative => {
                let (l, d) = focal_loss(o.cls_logit, false, focal.alpha, focal.gamma);
                out.cls += l;
                g.cls_logit = d;
            }
            SampleTarget::Positive {
                regression,
                centerness,
            } => {
                out.n_pos += 1;
                let (l, d) = focal_loss(o.cls_logit, true, focal.alpha, focal.gamma);
                out.cls += l;
                g.cls_logit = d;
                let (l, d) = iou_loss(&o.regression, regression);
                out.reg += l;
                g.regression = d;
                let (l, d) = centerness_loss(o.ctr_logit, *centerness);
                out.cen += l;
                g.ctr_logit = d;
            }
        }
    }
    let norm = out.normaliser();
    out.total = (out.cls + out.reg + out.cen) / norm;
    for g in &mut grads {
        g.cls_logit /= norm;
        g.ctr_logit /= norm;
        g.regression.iter_mut().for_each(|v| *v /= norm);
    }
    Ok((out, grads))
}
