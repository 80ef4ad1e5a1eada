//! Multi-level anchor-free smoke detector.
//!
//! A plain convolutional backbone produces one feature map per stage. Every
//! stage map goes through a deformable convolution whose offsets come from a
//! sibling convolution; the results are upsampled to the finest stride and
//! summed into one fused map. A 1x1 tower and three 1x1 predictors then give a
//! class logit, a positive `(l, t, r, b)` regression and a centerness logit
//! per fused-grid location.

pub mod checkpoint;
mod config;
mod postprocess;
pub mod training;

pub use checkpoint::{load_model, save_model, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConfigError, DetectorConfig};
pub use postprocess::{nms, Detection};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::assignment::{assign, AssignError, AssignMode, AssignmentResult, LocationPrediction, LocationRole};
use crate::geometry::{centerness_target, locations_for_map, regression_targets, BoundingBox, GeometryError, GridLocation, RegressionVector};
use crate::losses::{composite_loss, HeadGrad, HeadOutput, LossBreakdown, LossError, SampleTarget};
use crate::neuralops::{
    bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward, deformable_conv2d,
    deformable_conv2d_backward, pointwise, pointwise_backward, sgd_step, sigmoid, Activation, OpError,
    ParamId, ParameterSet, Real, Tensor,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("training diverged: non-finite {term} loss")]
    Divergence { term: &'static str },
    #[error("input shape {got:?} does not match the configured {expected:?}")]
    InputShape { expected: [usize; 4], got: [usize; 4] },
    #[error("batch is empty or its box lists do not match the images")]
    BadBatch,
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct LevelIds {
    offset: ConvIds,
    weight: ParamId,
    bias: ParamId,
    upsample: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<[ConvIds; 2]>,
    levels: Vec<LevelIds>,
    tower: ConvIds,
    cls: ConvIds,
    reg: ConvIds,
    ctr: ConvIds,
}

/// Head outputs on the fused grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps<T> {
    /// `(N, 1, H, W)` smoke logits.
    pub cls_logits: Tensor<T>,
    /// `(N, 4, H, W)` activated `(l, t, r, b)` in pixels, always positive.
    pub regression: Tensor<T>,
    /// `(N, 1, H, W)` centerness logits.
    pub ctr_logits: Tensor<T>,
    pub stride: usize,
    /// Image `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl<T: Real> PredictionMaps<T> {
    pub fn grid(&self) -> (usize, usize) {
        (self.cls_logits.height(), self.cls_logits.width())
    }

    pub fn locations(&self) -> Vec<GridLocation> {
        let (h, w) = self.grid();
        locations_for_map(h, w, self.stride)
    }

    fn regression_at(&self, n: usize, i: usize) -> RegressionVector {
        let c = |k| self.regression.plane(n, k)[i].as_f64();
        RegressionVector::new(c(0), c(1), c(2), c(3))
    }

    pub fn head_outputs(&self, n: usize) -> Vec<HeadOutput> {
        let cls = self.cls_logits.plane(n, 0);
        let ctr = self.ctr_logits.plane(n, 0);
        (0..cls.len())
            .map(|i| HeadOutput {
                cls_logit: cls[i].as_f64(),
                regression: self.regression_at(n, i),
                ctr_logit: ctr[i].as_f64(),
            })
            .collect()
    }

    pub fn location_predictions(&self, n: usize) -> Vec<LocationPrediction> {
        let cls = self.cls_logits.plane(n, 0);
        (0..cls.len())
            .map(|i| LocationPrediction {
                confidence: sigmoid(cls[i].as_f64()),
                regression: self.regression_at(n, i),
            })
            .collect()
    }
}

/// Intermediate values kept for the backward pass.
struct Trace<T> {
    /// Per stage and conv: input and pre-activation.
    stage_inputs: Vec<[Tensor<T>; 2]>,
    stage_pre: Vec<[Tensor<T>; 2]>,
    stage_out: Vec<Tensor<T>>,
    offsets: Vec<Tensor<T>>,
    deformed_shape: Vec<[usize; 4]>,
    fused: Tensor<T>,
    tower_pre: Tensor<T>,
    tower: Tensor<T>,
}

/// One training image with its ground-truth boxes, already at model size.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    /// `(1, C, H, W)`.
    pub image: Tensor<T>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct Detector<T = f32> {
    config: DetectorConfig,
    params: ParameterSet<T>,
    layout: Layout,
}

fn stage_conv_strides(stage: usize, first_stride: usize) -> [usize; 2] {
    if stage > 0 {
        return [2, 1];
    }
    match first_stride {
        1 => [1, 1],
        2 => [2, 1],
        _ => [2, 2],
    }
}

/// Prior probability of smoke used to initialise the classification bias.
const CLS_PRIOR: f64 = 0.01;

impl<T: Real> Detector<T> {
    /// Fresh model with seeded He-normal weights and zero offset predictors.
    pub fn new(config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParameterSet::new();
        let mut conv = |params: &mut ParameterSet<T>,
                        name: &str,
                        out_c: usize,
                        in_c: usize,
                        k: usize,
                        stride: usize,
                        init: Init| {
            let shape = [out_c, in_c, k, k];
            let weight = match init {
                Init::He => {
                    let normal = Normal::new(0.0, (2.0 / (in_c * k * k) as f64).sqrt()).expect("valid std");
                    let data = (0..shape.iter().product()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_f64(shape, data).expect("non-empty")
                }
                Init::Zero => Tensor::zeros(shape),
            };
            let weight = params.add(format!("{name}.weight"), weight);
            let bias = params.add(format!("{name}.bias"), Tensor::zeros([out_c, 1, 1, 1]));
            ConvIds {
                weight,
                bias,
                stride,
                padding: k / 2,
            }
        };

        let mut stages = Vec::new();
        let mut in_c = config.input_channels;
        for (s, &ch) in config.stage_channels.iter().enumerate() {
            let strides = stage_conv_strides(s, config.stage_strides[0]);
            let a = conv(&mut params, &format!("backbone.{s}.0"), ch, in_c, 3, strides[0], Init::He);
            let b = conv(&mut params, &format!("backbone.{s}.1"), ch, ch, 3, strides[1], Init::He);
            stages.push([a, b]);
            in_c = ch;
        }

        let k = config.deform_kernel;
        let hc = config.head_channels;
        let mut levels = Vec::new();
        for (l, &ch) in config.stage_channels.iter().enumerate() {
            let offset = conv(&mut params, &format!("fpn.{l}.offset"), 2 * k * k, ch, k, 1, Init::Zero);
            let dc = conv(&mut params, &format!("fpn.{l}.deform"), hc, ch, k, 1, Init::He);
            levels.push(LevelIds {
                offset,
                weight: dc.weight,
                bias: dc.bias,
                upsample: config.stage_strides[l] / config.fused_stride,
            });
        }

        let tower = conv(&mut params, "head.tower", hc, hc, 1, 1, Init::He);
        let cls = conv(&mut params, "head.cls", 1, hc, 1, 1, Init::He);
        let reg = conv(&mut params, "head.reg", 4, hc, 1, 1, Init::He);
        let ctr = conv(&mut params, "head.ctr", 1, hc, 1, 1, Init::He);
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        params.value_mut(cls.bias).data_mut()[0] = T::of(prior_bias);
        // Small head weights keep initial predictions near the biases.
        for id in [cls.weight, reg.weight, ctr.weight] {
            let scaled = params.value(id).map(|v| v * T::of(0.1));
            *params.value_mut(id) = scaled;
        }

        Ok(Self {
            config,
            params,
            layout: Layout {
                stages,
                levels,
                tower,
                cls,
                reg,
                ctr,
            },
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// Same model in another scalar type.
    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn input_shape(&self, n: usize) -> [usize; 4] {
        [
            n,
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ]
    }

    fn conv(&self, x: &Tensor<T>, ids: &ConvIds) -> Result<Tensor<T>, OpError> {
        conv2d(
            x,
            self.params.value(ids.weight),
            Some(self.params.value(ids.bias)),
            ids.stride,
            ids.padding,
        )
    }

    fn forward_trace(&self, images: &Tensor<T>) -> Result<(PredictionMaps<T>, Trace<T>), DetectorError> {
        let expected = self.input_shape(images.batch());
        if images.shape() != expected {
            return Err(DetectorError::InputShape {
                expected,
                got: images.shape(),
            });
        }
        let mut stage_inputs = Vec::new();
        let mut stage_pre = Vec::new();
        let mut stage_out = Vec::new();
        let mut x = images.clone();
        for ids in &self.layout.stages {
            let pre0 = self.conv(&x, &ids[0])?;
            let a0 = pointwise(&pre0, Activation::Relu);
            let pre1 = self.conv(&a0, &ids[1])?;
            let a1 = pointwise(&pre1, Activation::Relu);
            stage_inputs.push([x, a0]);
            stage_pre.push([pre0, pre1]);
            x = a1.clone();
            stage_out.push(a1);
        }

        let mut fused: Option<Tensor<T>> = None;
        let mut offsets = Vec::new();
        let mut deformed_shape = Vec::new();
        for (feat, lv) in stage_out.iter().zip(&self.layout.levels) {
            let off = self.conv(feat, &lv.offset)?;
            let d = deformable_conv2d(
                feat,
                self.params.value(lv.weight),
                Some(self.params.value(lv.bias)),
                &off,
            )?;
            deformed_shape.push(d.shape());
            let up = bilinear_upsample(&d, lv.upsample)?;
            match fused.as_mut() {
                None => fused = Some(up),
                Some(f) => f.add_assign(&up)?,
            }
            offsets.push(off);
        }
        let fused = fused.expect("at least one level");

        let tower_pre = self.conv(&fused, &self.layout.tower)?;
        let tower = pointwise(&tower_pre, Activation::Relu);
        let cls_logits = self.conv(&tower, &self.layout.cls)?;
        let stride = T::of(self.config.fused_stride as f64);
        let regression = self.conv(&tower, &self.layout.reg)?.map(|v| v.exp() * stride);
        let ctr_logits = self.conv(&tower, &self.layout.ctr)?;

        let maps = PredictionMaps {
            cls_logits,
            regression,
            ctr_logits,
            stride: self.config.fused_stride,
            image_size: (self.config.input_width, self.config.input_height),
        };
        let trace = Trace {
            stage_inputs,
            stage_pre,
            stage_out,
            offsets,
            deformed_shape,
            fused,
            tower_pre,
            tower,
        };
        Ok((maps, trace))
    }

    /// Runs the network on `(N, C, H, W)` images.
    pub fn forward(&self, images: &Tensor<T>) -> Result<PredictionMaps<T>, DetectorError> {
        Ok(self.forward_trace(images)?.0)
    }

    fn accumulate_conv(
        &mut self,
        input: &Tensor<T>,
        ids: &ConvIds,
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>, OpError> {
        let g = conv2d_backward(input, self.params.value(ids.weight), ids.stride, ids.padding, grad_out)?;
        self.params.accumulate(ids.weight, &g.weight)?;
        self.params.accumulate(ids.bias, &g.bias)?;
        Ok(g.input)
    }

    /// Backpropagates gradients of the loss with respect to the three output
    /// maps (regression gradient taken w.r.t. the activated values) into the
    /// parameter gradient accumulators.
    fn backward(
        &mut self,
        maps: &PredictionMaps<T>,
        trace: &Trace<T>,
        grad_cls: &Tensor<T>,
        grad_reg: &Tensor<T>,
        grad_ctr: &Tensor<T>,
    ) -> Result<(), DetectorError> {
        let layout = self.layout.clone();
        // d/dx exp(x) * s = exp(x) * s
        let mut grad_reg_raw = grad_reg.clone();
        for (g, &r) in grad_reg_raw.data_mut().iter_mut().zip(maps.regression.data()) {
            *g = *g * r;
        }
        let mut grad_tower = self.accumulate_conv(&trace.tower, &layout.cls, grad_cls)?;
        grad_tower.add_assign(&self.accumulate_conv(&trace.tower, &layout.reg, &grad_reg_raw)?)?;
        grad_tower.add_assign(&self.accumulate_conv(&trace.tower, &layout.ctr, grad_ctr)?)?;
        let grad_tower_pre = pointwise_backward(&trace.tower_pre, &trace.tower, &grad_tower, Activation::Relu)?;
        let grad_fused = self.accumulate_conv(&trace.fused, &layout.tower, &grad_tower_pre)?;

        let mut grad_stage_out = Vec::with_capacity(layout.levels.len());
        for (l, lv) in layout.levels.iter().enumerate() {
            let feat = &trace.stage_out[l];
            let grad_d = bilinear_upsample_backward(trace.deformed_shape[l], lv.upsample, &grad_fused)?;
            let g = deformable_conv2d_backward(feat, self.params.value(lv.weight), &trace.offsets[l], &grad_d)?;
            self.params.accumulate(lv.weight, &g.weight)?;
            self.params.accumulate(lv.bias, &g.bias)?;
            let mut grad_feat = g.input;
            grad_feat.add_assign(&self.accumulate_conv(feat, &lv.offset, &g.offsets)?)?;
            grad_stage_out.push(grad_feat);
        }

        let mut carry: Option<Tensor<T>> = None;
        for s in (0..layout.stages.len()).rev() {
            let mut grad_out = grad_stage_out[s].clone();
            if let Some(c) = carry.take() {
                grad_out.add_assign(&c)?;
            }
            let ids = layout.stages[s];
            let [in0, in1] = &trace.stage_inputs[s];
            let [pre0, pre1] = &trace.stage_pre[s];
            let g_pre1 = pointwise_backward(pre1, &trace.stage_out[s], &grad_out, Activation::Relu)?;
            let g_a0 = self.accumulate_conv(in1, &ids[1], &g_pre1)?;
            let g_pre0 = pointwise_backward(pre0, in1, &g_a0, Activation::Relu)?;
            let g_in = self.accumulate_conv(in0, &ids[0], &g_pre0)?;
            carry = Some(g_in);
        }
        Ok(())
    }

    /// Assigns locations for image `n` of `maps` and builds its loss targets.
    pub fn targets_for(
        &self,
        maps: &PredictionMaps<T>,
        n: usize,
        boxes: &[BoundingBox],
        mode: AssignMode,
    ) -> Result<(AssignmentResult, Vec<SampleTarget>), DetectorError> {
        let locations = maps.locations();
        let (w, h) = maps.image_size;
        let assignment = assign(
            &locations,
            boxes,
            &maps.location_predictions(n),
            Some((w as f64, h as f64)),
            mode,
        )?;
        let targets = targets_from_assignment(&assignment, &locations, boxes)?;
        Ok((assignment, targets))
    }

    fn batch_images(&self, batch: &[TrainSample<T>]) -> Result<Tensor<T>, DetectorError> {
        if batch.is_empty() {
            return Err(DetectorError::BadBatch);
        }
        let refs: Vec<&Tensor<T>> = batch.iter().map(|s| &s.image).collect();
        let shape = self.input_shape(1);
        if let Some(bad) = refs.iter().find(|t| t.shape() != shape) {
            return Err(DetectorError::InputShape {
                expected: shape,
                got: bad.shape(),
            });
        }
        // Stacking along channels of single-item tensors is stacking along batch.
        let data: Vec<T> = refs.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(Tensor::from_vec(self.input_shape(batch.len()), data)?)
    }

    fn batch_loss(
        &self,
        maps: &PredictionMaps<T>,
        batch: &[TrainSample<T>],
        mode: AssignMode,
        fixed: Option<&[AssignmentResult]>,
    ) -> Result<(LossBreakdown, Vec<HeadGrad>, Vec<AssignmentResult>), DetectorError> {
        let mut outputs = Vec::new();
        let mut targets = Vec::new();
        let mut assignments = Vec::with_capacity(batch.len());
        let locations = maps.locations();
        for (n, sample) in batch.iter().enumerate() {
            let (assignment, t) = match fixed {
                Some(f) => {
                    let a = f.get(n).ok_or(DetectorError::BadBatch)?.clone();
                    let t = targets_from_assignment(&a, &locations, &sample.boxes)?;
                    (a, t)
                }
                None => self.targets_for(maps, n, &sample.boxes, mode)?,
            };
            outputs.extend(maps.head_outputs(n));
            targets.extend(t);
            assignments.push(assignment);
        }
        let (loss, grads) = composite_loss(&outputs, &targets, self.config.focal)?;
        for (term, v) in [("cls", loss.cls), ("reg", loss.reg), ("cen", loss.cen)] {
            if !v.is_finite() {
                return Err(DetectorError::Divergence { term });
            }
        }
        Ok((loss, grads, assignments))
    }

    /// Loss of a batch without touching gradients. With `fixed`, the given
    /// assignments are used instead of assigning from the current predictions.
    pub fn loss(
        &self,
        batch: &[TrainSample<T>],
        mode: AssignMode,
        fixed: Option<&[AssignmentResult]>,
    ) -> Result<LossBreakdown, DetectorError> {
        let images = self.batch_images(batch)?;
        let maps = self.forward(&images)?;
        Ok(self.batch_loss(&maps, batch, mode, fixed)?.0)
    }

    /// Forward, assignment, loss and backward. Parameter gradients are added to
    /// the accumulators; nothing is updated.
    pub fn loss_and_gradients(
        &mut self,
        batch: &[TrainSample<T>],
        mode: AssignMode,
        fixed: Option<&[AssignmentResult]>,
    ) -> Result<(LossBreakdown, Vec<AssignmentResult>), DetectorError> {
        let images = self.batch_images(batch)?;
        let (maps, trace) = self.forward_trace(&images)?;
        let (loss, grads, assignments) = self.batch_loss(&maps, batch, mode, fixed)?;

        let (h, w) = maps.grid();
        let hw = h * w;
        let n = batch.len();
        let mut g_cls = vec![0.0; n * hw];
        let mut g_reg = vec![0.0; n * 4 * hw];
        let mut g_ctr = vec![0.0; n * hw];
        for (j, g) in grads.iter().enumerate() {
            let (b, i) = (j / hw, j % hw);
            g_cls[j] = g.cls_logit;
            g_ctr[j] = g.ctr_logit;
            for k in 0..4 {
                g_reg[(b * 4 + k) * hw + i] = g.regression[k];
            }
        }
        self.backward(
            &maps,
            &trace,
            &Tensor::from_f64([n, 1, h, w], g_cls)?,
            &Tensor::from_f64([n, 4, h, w], g_reg)?,
            &Tensor::from_f64([n, 1, h, w], g_ctr)?,
        )?;
        Ok((loss, assignments))
    }

    /// Assignment mode for a given training iteration.
    pub fn mode_for_iteration(&self, iteration: usize) -> AssignMode {
        if iteration < self.config.warmup_iters {
            AssignMode::CenterSampling
        } else {
            AssignMode::Atss
        }
    }

    /// One optimisation step on `batch`.
    pub fn train_step(&mut self, batch: &[TrainSample<T>], iteration: usize) -> Result<LossBreakdown, DetectorError> {
        self.params.zero_grad();
        let mode = self.mode_for_iteration(iteration);
        let (loss, _) = self.loss_and_gradients(batch, mode, None)?;
        if let Some(max_norm) = self.config.grad_clip_norm {
            clip_gradients(&mut self.params, max_norm);
        }
        sgd_step(&mut self.params, self.config.lr, self.config.momentum)?;
        Ok(loss)
    }

    /// Detections for one `(1, C, H, W)` image, highest score first.
    pub fn detect(&self, image: &Tensor<T>, score_thresh: f64, nms_thresh: f64) -> Result<Vec<Detection>, DetectorError> {
        let maps = self.forward(image)?;
        Ok(postprocess::detections_from_maps(&maps, 0, score_thresh, nms_thresh))
    }
}

enum Init {
    He,
    Zero,
}

/// Scales all gradients so their global 2-norm is at most `max_norm`.
fn clip_gradients<T: Real>(params: &mut ParameterSet<T>, max_norm: f64) {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
        }
    }
}

/// Loss targets from an assignment: positives regress to their resolved box.
pub fn targets_from_assignment(
    assignment: &AssignmentResult,
    locations: &[GridLocation],
    boxes: &[BoundingBox],
) -> Result<Vec<SampleTarget>, GeometryError> {
    assignment
        .roles
        .iter()
        .zip(locations)
        .map(|(role, loc)| match role {
            LocationRole::Negative => Ok(SampleTarget::Negative),
            LocationRole::Ignored => Ok(SampleTarget::Ignored),
            LocationRole::Positive { gt } => {
                let regression = regression_targets(loc, &boxes[*gt])?;
                Ok(SampleTarget::Positive {
                    regression,
                    centerness: centerness_target(&regression),
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
