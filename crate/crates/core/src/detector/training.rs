//! Mini-batch training loop over labeled images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Detector, DetectorError, TrainSample};
use crate::imaging::{flip_box, flip_tensor, image_to_tensor, resize_labeled, LabeledImage};
use crate::losses::LossBreakdown;

/// Resizes a labeled image to the model input and converts it to a tensor.
pub fn prepare_sample(model: &Detector<f32>, sample: &LabeledImage) -> TrainSample<f32> {
    let cfg = model.config();
    let resized = resize_labeled(sample, cfg.input_width, cfg.input_height);
    TrainSample {
        image: image_to_tensor(&resized.image, cfg.input_channels),
        boxes: resized.boxes,
    }
}

fn flipped(sample: &TrainSample<f32>) -> TrainSample<f32> {
    let width = sample.image.width() as f64;
    TrainSample {
        image: flip_tensor(&sample.image),
        boxes: sample.boxes.iter().map(|b| flip_box(b, width)).collect(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<LossBreakdown>,
}

impl TrainReport {
    /// Mean total loss over steps `[from, to)`.
    pub fn mean_total(&self, from: usize, to: usize) -> f64 {
        let to = to.min(self.losses.len());
        let from = from.min(to);
        if from == to {
            return f64::NAN;
        }
        self.losses[from..to].iter().map(|l| l.total).sum::<f64>() / (to - from) as f64
    }
}

/// Runs `steps` optimisation steps with shuffled mini-batches and random
/// horizontal flips. `on_step` sees every step's loss.
pub fn train(
    model: &mut Detector<f32>,
    data: &[LabeledImage],
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport, DetectorError> {
    if data.is_empty() {
        return Err(DetectorError::BadBatch);
    }
    let prepared: Vec<TrainSample<f32>> = data.iter().map(|s| prepare_sample(model, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();
    let batch_size = model.config().batch_size.min(prepared.len());
    let mut report = TrainReport::default();
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &prepared[order[cursor]];
            cursor += 1;
            batch.push(if rng.random_bool(0.5) { flipped(s) } else { s.clone() });
        }
        let loss = model.train_step(&batch, step)?;
        on_step(step, &loss);
        report.losses.push(loss);
    }
    Ok(report)
}
