//! Detection on raw frame bytes.

use smokewatch_core::imaging::{decode_image, image_to_tensor, resize_for_model};
use smokewatch_core::Detector;

use crate::alert::BoxScore;

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub width: u32,
    pub height: u32,
    /// Boxes in source-frame pixels, best first.
    pub detections: Vec<BoxScore>,
}

/// Decodes a frame, resizes it to the model input and runs the detector.
pub fn analyse_frame(
    model: &Detector<f32>,
    bytes: &[u8],
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Analysis, image::ImageError> {
    let img = decode_image(bytes)?;
    let cfg = model.config();
    let (resized, (sx, sy)) = resize_for_model(&img, cfg.input_width, cfg.input_height);
    let input = image_to_tensor(&resized, cfg.input_channels);
    let detections = model
        .detect(&input, score_thresh, nms_thresh)
        .expect("input tensor matches the model config")
        .into_iter()
        .map(|d| BoxScore {
            x0: d.bbox.x0() * sx,
            y0: d.bbox.y0() * sy,
            x1: d.bbox.x1() * sx,
            y1: d.bbox.y1() * sy,
            score: d.score,
        })
        .collect();
    Ok(Analysis {
        width: img.width(),
        height: img.height(),
        detections,
    })
}
