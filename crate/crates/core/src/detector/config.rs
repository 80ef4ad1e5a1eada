use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::FocalParams;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid detector config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels of each backbone stage.
    pub stage_channels: Vec<usize>,
    /// Cumulative stride of each stage output; doubles from stage to stage.
    pub stage_strides: Vec<usize>,
    /// Stride of the fused prediction grid; equals the finest stage stride.
    pub fused_stride: usize,
    pub head_channels: usize,
    pub deform_kernel: usize,
    pub focal: FocalParams,
    pub lr: f64,
    pub momentum: f64,
    /// Iterations that use center sampling before score-based assignment.
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub grad_clip_norm: Option<f64>,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_height: 128,
            input_width: 128,
            input_channels: 3,
            stage_channels: vec![8, 16, 32],
            stage_strides: vec![4, 8, 16],
            fused_stride: 4,
            head_channels: 16,
            deform_kernel: 3,
            focal: FocalParams::default(),
            lr: 0.01,
            momentum: 0.9,
            warmup_iters: 300,
            batch_size: 4,
            grad_clip_norm: Some(10.0),
            score_thresh: 0.5,
            nms_thresh: 0.5,
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Small configuration for unit tests and gradient checks.
    pub fn toy(size: usize) -> Self {
        Self {
            input_height: size,
            input_width: size,
            input_channels: 2,
            stage_channels: vec![3, 4, 4],
            stage_strides: vec![2, 4, 8],
            fused_stride: 2,
            head_channels: 4,
            warmup_iters: 0,
            batch_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        let n = self.stage_channels.len();
        if n == 0 || n != self.stage_strides.len() {
            return err(format!(
                "{} stage widths but {} stage strides",
                n,
                self.stage_strides.len()
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.head_channels == 0 || self.input_channels == 0 {
            return err("channel counts must be at least 1".into());
        }
        if ![1, 2, 4].contains(&self.stage_strides[0]) {
            return err(format!(
                "first stage stride must be 1, 2 or 4, got {}",
                self.stage_strides[0]
            ));
        }
        if self.stage_strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return err(format!("stage strides must double: {:?}", self.stage_strides));
        }
        if self.fused_stride != self.stage_strides[0] {
            return err(format!(
                "fused stride {} must equal the finest stage stride {}",
                self.fused_stride, self.stage_strides[0]
            ));
        }
        let coarsest = self.stage_strides[n - 1];
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % coarsest != 0
            || self.input_width % coarsest != 0
        {
            return err(format!(
                "input {}x{} must be a positive multiple of the coarsest stride {coarsest}",
                self.input_height, self.input_width
            ));
        }
        if self.deform_kernel % 2 == 0 {
            return err("deformable kernel size must be odd".into());
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.score_thresh) || !unit(self.nms_thresh) {
            return err("score and NMS thresholds must lie in (0, 1)".into());
        }
        if !unit(self.focal.alpha) || self.focal.gamma < 0.0 {
            return err("focal alpha must lie in (0, 1) and gamma must be >= 0".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return err("lr must be > 0 and momentum in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return err("batch size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return err("gradient clip norm must be positive".into());
            }
        }
        Ok(())
    }

    /// Fused grid `(height, width)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.input_height / self.fused_stride,
            self.input_width / self.fused_stride,
        )
    }
}
