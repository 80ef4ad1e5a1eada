use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::iou;
use crate::gradcheck::{check_gradient_at, random_tensor};
use crate::losses::SampleTarget;

fn toy_sample<T: Real>(rng: &mut ChaCha8Rng, cfg: &DetectorConfig, boxes: usize) -> TrainSample<T> {
    let (h, w) = (cfg.input_height as f64, cfg.input_width as f64);
    let boxes = (0..boxes)
        .map(|_| {
            let bw = rng.random_range(0.3..0.6) * w;
            let bh = rng.random_range(0.3..0.6) * h;
            let x0 = rng.random_range(0.0..w - bw);
            let y0 = rng.random_range(0.0..h - bh);
            BoundingBox::new(x0, y0, x0 + bw, y0 + bh).unwrap()
        })
        .collect();
    TrainSample {
        image: random_tensor(rng, [1, cfg.input_channels, cfg.input_height, cfg.input_width]),
        boxes,
    }
}

/// Forward pass with every deformable convolution replaced by a plain one.
fn plain_conv_forward(model: &Detector<f64>, x: &Tensor<f64>) -> PredictionMaps<f64> {
    let p = model.params();
    let v = |name: &str| p.value(p.find(name).unwrap());
    let cfg = model.config();
    let mut feats = Vec::new();
    let mut x = x.clone();
    for s in 0..cfg.stage_channels.len() {
        let strides = stage_conv_strides(s, cfg.stage_strides[0]);
        for (j, stride) in strides.iter().enumerate() {
            let pre = conv2d(&x, v(&format!("backbone.{s}.{j}.weight")), Some(v(&format!("backbone.{s}.{j}.bias"))), *stride, 1).unwrap();
            x = pre.map(|a| a.max(0.0));
        }
        feats.push(x.clone());
    }
    let k = cfg.deform_kernel;
    let mut fused: Option<Tensor<f64>> = None;
    for (l, f) in feats.iter().enumerate() {
        let d = conv2d(f, v(&format!("fpn.{l}.deform.weight")), Some(v(&format!("fpn.{l}.deform.bias"))), 1, k / 2).unwrap();
        let up = bilinear_upsample(&d, cfg.stage_strides[l] / cfg.fused_stride).unwrap();
        match fused.as_mut() {
            None => fused = Some(up),
            Some(acc) => acc.add_assign(&up).unwrap(),
        }
    }
    let head = |t: &Tensor<f64>, n: &str| conv2d(t, v(&format!("head.{n}.weight")), Some(v(&format!("head.{n}.bias"))), 1, 0).unwrap();
    let tower = head(&fused.unwrap(), "tower").map(|a| a.max(0.0));
    let s = cfg.fused_stride as f64;
    PredictionMaps {
        cls_logits: head(&tower, "cls"),
        regression: head(&tower, "reg").map(|a| a.exp() * s),
        ctr_logits: head(&tower, "ctr"),
        stride: cfg.fused_stride,
        image_size: (cfg.input_width, cfg.input_height),
    }
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_shapes_follow_config() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let first = [1, 2, 4][rng.random_range(0..3)];
        let levels = rng.random_range(1..4);
        let coarsest = first << (levels - 1);
        let cfg = DetectorConfig {
            input_height: coarsest * rng.random_range(1..4),
            input_width: coarsest * rng.random_range(1..4),
            input_channels: rng.random_range(1..4),
            stage_channels: (0..levels).map(|_| rng.random_range(1..5)).collect(),
            stage_strides: (0..levels).map(|l| first << l).collect(),
            fused_stride: first,
            head_channels: rng.random_range(1..5),
            ..DetectorConfig::default()
        };
        let model = Detector::<f64>::new(cfg.clone()).unwrap();
        let n = rng.random_range(1..3);
        let x = random_tensor(&mut rng, [n, cfg.input_channels, cfg.input_height, cfg.input_width]);
        let maps = model.forward(&x).unwrap();
        let (gh, gw) = cfg.grid();
        assert_eq!(maps.cls_logits.shape(), [n, 1, gh, gw]);
        assert_eq!(maps.regression.shape(), [n, 4, gh, gw]);
        assert_eq!(maps.ctr_logits.shape(), [n, 1, gh, gw]);
        assert!(maps.regression.data().iter().all(|&r| r > 0.0));
        assert_eq!(maps.locations().len(), gh * gw);
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = Detector::<f32>::new(DetectorConfig::toy(16)).unwrap();
    let err = model.forward(&Tensor::zeros([1, 3, 16, 16])).unwrap_err();
    assert!(matches!(err, DetectorError::InputShape { .. }));
    assert!(matches!(model.loss(&[], AssignMode::Atss, None), Err(DetectorError::BadBatch)));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        DetectorConfig { fused_stride: 8, ..DetectorConfig::default() },
        DetectorConfig { stage_strides: vec![4, 8, 32], ..DetectorConfig::default() },
        DetectorConfig { input_height: 100, ..DetectorConfig::default() },
        DetectorConfig { deform_kernel: 2, ..DetectorConfig::default() },
        DetectorConfig { score_thresh: 1.0, ..DetectorConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(Detector::<f32>::new(cfg), Err(DetectorError::Config(_))));
    }
}

#[test]
fn fresh_model_matches_plain_convolution_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..5 {
        let cfg = DetectorConfig { init_seed: seed, ..DetectorConfig::toy(16) };
        let model = Detector::<f64>::new(cfg.clone()).unwrap();
        let x = random_tensor(&mut rng, [2, 2, 16, 16]);
        let maps = model.forward(&x).unwrap();
        let reference = plain_conv_forward(&model, &x);
        assert!(max_abs_diff(&maps.cls_logits, &reference.cls_logits) < 1e-6);
        assert!(max_abs_diff(&maps.regression, &reference.regression) < 1e-6);
        assert!(max_abs_diff(&maps.ctr_logits, &reference.ctr_logits) < 1e-6);
    }
}

#[test]
fn initialisation_is_deterministic_per_seed() {
    let a = Detector::<f32>::new(DetectorConfig::toy(16)).unwrap();
    let b = Detector::<f32>::new(DetectorConfig::toy(16)).unwrap();
    let c = Detector::<f32>::new(DetectorConfig { init_seed: 9, ..DetectorConfig::toy(16) }).unwrap();
    let flat = |m: &Detector<f32>| m.params().iter().flat_map(|p| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    let cls = a.params().find("head.cls.bias").unwrap();
    assert!((sigmoid(a.params().value(cls).data()[0] as f64) - CLS_PRIOR).abs() < 1e-6);
}

#[test]
fn images_without_boxes_have_no_positives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DetectorConfig::toy(16);
    let mut model = Detector::<f64>::new(cfg.clone()).unwrap();
    let batch = vec![toy_sample(&mut rng, &cfg, 0), toy_sample(&mut rng, &cfg, 0)];
    let (loss, assignments) = model.loss_and_gradients(&batch, AssignMode::Atss, None).unwrap();
    assert_eq!(loss.n_pos, 0);
    assert_eq!(loss.reg, 0.0);
    assert_eq!(loss.cen, 0.0);
    assert!(loss.cls > 0.0);
    assert!(assignments.iter().all(|a| a.n_pos() == 0));
    assert!(model.params().iter().all(|p| p.grad.all_finite()));
}

#[test]
fn targets_follow_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DetectorConfig::toy(16);
    let model = Detector::<f64>::new(cfg.clone()).unwrap();
    let s = toy_sample::<f64>(&mut rng, &cfg, 2);
    let maps = model.forward(&s.image).unwrap();
    let (assignment, targets) = model.targets_for(&maps, 0, &s.boxes, AssignMode::Atss).unwrap();
    let locations = maps.locations();
    assert!(assignment.n_pos() > 0);
    for (i, (role, t)) in assignment.roles.iter().zip(&targets).enumerate() {
        match (role, t) {
            (LocationRole::Negative, SampleTarget::Negative) | (LocationRole::Ignored, SampleTarget::Ignored) => {}
            (LocationRole::Positive { gt }, SampleTarget::Positive { regression, .. }) => {
                let b = &s.boxes[*gt];
                let loc = &locations[i];
                assert!((loc.x() - regression.l - b.x0()).abs() < 1e-12);
                assert!((loc.y() + regression.b - b.y1()).abs() < 1e-12);
            }
            other => panic!("role and target disagree at {i}: {other:?}"),
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for instance in 0..5 {
        let cfg = DetectorConfig { init_seed: instance, ..DetectorConfig::toy(16) };
        let mut model = Detector::<f64>::new(cfg.clone()).unwrap();
        for p in model.params_mut().iter_mut() {
            if p.name.contains("offset") {
                p.value = random_tensor::<f64, _>(&mut rng, p.value.shape()).map(|v| 0.2 * v);
            }
        }
        let batch = vec![toy_sample(&mut rng, &cfg, 1), toy_sample(&mut rng, &cfg, 2)];
        model.params_mut().zero_grad();
        let (_, fixed) = model.loss_and_gradients(&batch, AssignMode::Atss, None).unwrap();
        let snapshot = model.clone();
        let mut rel = Vec::new();
        for _ in 0..10 {
            let pi = rng.random_range(0..snapshot.params().len());
            let param = snapshot.params().iter().nth(pi).unwrap();
            let idx = rng.random_range(0..param.value.len());
            let name = param.name.clone();
            let check = check_gradient_at(&param.value, param.grad.data(), 1e-5, &[idx], |probe| {
                let mut m = snapshot.clone();
                let id = m.params().find(&name).unwrap();
                *m.params_mut().value_mut(id) = probe.clone();
                m.loss(&batch, AssignMode::Atss, Some(&fixed)).unwrap().total
            });
            rel.push((check.max_abs_error, param.grad.data()[idx]));
        }
        let analytic: Vec<f64> = rel.iter().map(|r| r.1).collect();
        let diff: Vec<f64> = rel.iter().map(|r| r.0).collect();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let err = diff.iter().map(|d| d * d).sum::<f64>().sqrt() / norm.max(1e-12);
        assert!(err <= 1e-3, "instance {instance}: relative error {err}");
    }
}

#[test]
fn training_overfits_a_single_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = DetectorConfig { lr: 0.01, ..DetectorConfig::toy(32) };
    let mut model = Detector::<f32>::new(cfg.clone()).unwrap();
    let batch = vec![toy_sample(&mut rng, &cfg, 1)];
    let first = model.train_step(&batch, 0).unwrap().total;
    let mut last = first;
    for it in 1..200 {
        last = model.train_step(&batch, it).unwrap().total;
    }
    assert!(last <= 0.2 * first, "loss {first} -> {last}");
}

#[test]
fn detect_respects_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = DetectorConfig::toy(16);
    let mut model = Detector::<f32>::new(cfg.clone()).unwrap();
    let x: Tensor<f32> = random_tensor(&mut rng, [1, 2, 16, 16]);
    assert!(model.detect(&x, 0.5, 0.5).unwrap().is_empty());
    // Force every location to fire with the same box size.
    for name in ["head.cls", "head.ctr", "head.reg"] {
        let w = model.params().find(&format!("{name}.weight")).unwrap();
        model.params_mut().value_mut(w).fill_zero();
        let b = model.params().find(&format!("{name}.bias")).unwrap();
        let fill = if name == "head.reg" { 0.0 } else { 10.0 };
        *model.params_mut().value_mut(b) = model.params().value(b).map(|_| fill);
    }
    let all = model.detect(&x, 0.5, 0.99).unwrap();
    assert_eq!(all.len(), 64);
    for d in &all {
        assert!(d.bbox.x0() >= 0.0 && d.bbox.x1() <= 16.0);
        assert!(d.score > 0.99);
    }
    let kept = model.detect(&x, 0.5, 0.01).unwrap();
    assert!(kept.len() < all.len());
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            assert!(iou(&a.bbox, &b.bbox) < 0.01);
        }
    }
    assert!(model.detect(&Tensor::zeros([1, 1, 16, 16]), 0.5, 0.5).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = DetectorConfig { init_seed: 3, ..DetectorConfig::toy(16) };
    let model = Detector::<f32>::new(cfg.clone()).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config(), model.config());
    let x: Tensor<f32> = random_tensor(&mut rng, [1, 2, 16, 16]);
    assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.smkw");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap().forward(&x).unwrap(), model.forward(&x).unwrap());

    for cut in [0, 5, 11, 40, bytes.len() - 1] {
        assert!(matches!(checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(checkpoint::from_bytes(&extra), Err(CheckpointError::Corrupt(_))));
    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(checkpoint::from_bytes(&versioned), Err(CheckpointError::UnsupportedVersion { found: 7 })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&magic), Err(CheckpointError::Corrupt(_))));
}
