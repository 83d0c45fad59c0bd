//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use laf_core::aggmodel::{AggregationModel, ModelConfig, PRIMITIVE_DIM};
use laf_core::backbone::{BackboneConfig, LayerSpec};
use laf_core::preprocess::{align_left_eye, apply_affine, CanonicalFrame};
use laf_core::synthgen::LandmarkSet;
use laf_core::tensor::{ImageTensor, LabeledImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// AP over every distinct threshold: sum of recall steps times precision at
/// the step, with `score >= t` counted as positive predictions.
pub fn ap_all_thresholds(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Two-pass mean and population standard deviation.
pub fn naive_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (mean, (ss / n).sqrt())
}

/// Small random architecture; enough variety to exercise strides, BN and
/// pooling edge cases.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    loop {
        let c = random_config_once(rng);
        if c.validate().is_ok() {
            return c;
        }
    }
}

fn random_config_once(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_layers = rng.gen_range(1..=3);
    let layers = (0..n_layers)
        .map(|_| LayerSpec {
            out_channels: rng.gen_range(1..=4),
            stride: rng.gen_range(1..=2),
            kernel: 3,
            batch_norm: rng.gen_bool(0.5),
        })
        .collect();
    let mut c = ModelConfig::new(BackboneConfig { in_channels: 3, input_size: rng.gen_range(6..=12), layers });
    c.hidden_dims = [rng.gen_range(1..=6), rng.gen_range(1..=6)];
    c
}

pub fn mini_config() -> ModelConfig {
    let layers = vec![
        LayerSpec { out_channels: 3, stride: 2, kernel: 3, batch_norm: true },
        LayerSpec { out_channels: 3, stride: 1, kernel: 3, batch_norm: true },
        LayerSpec { out_channels: 2, stride: 2, kernel: 3, batch_norm: false },
    ];
    let mut c = ModelConfig::new(BackboneConfig { in_channels: 3, input_size: 8, layers });
    c.hidden_dims = [5, 4];
    c
}

/// Seeded model with every tensor randomised, including the zero-initialised
/// head and the frozen statistics.
pub fn random_model(config: &ModelConfig, seed: u64) -> AggregationModel<f64> {
    let mut m = AggregationModel::<f64>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    m.for_each_tensor_mut(&mut |name, _, t| {
        let positive = name.ends_with("running_var") || name.ends_with("norm.scale") || name.ends_with("gamma");
        for v in t.iter_mut() {
            if positive {
                *v = rng.gen_range(0.5..2.0);
            } else if name.starts_with("head") || name.ends_with("running_mean") || name.ends_with("norm.mean") {
                *v = rng.gen_range(-1.0..1.0);
            } else {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    });
    m
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor<f64> {
    ImageTensor::from_fn(size, size, 3, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Logit by dotting the head with the concatenated primitives.
pub fn concat_logit(model: &AggregationModel<f64>, image: &ImageTensor<f64>) -> f64 {
    let inf = model.infer(image).unwrap();
    let concat: Vec<f64> = inf.primitives.iter().flat_map(|p| p.values.iter().copied()).collect();
    assert_eq!(concat.len(), PRIMITIVE_DIM * model.num_layers());
    concat.iter().zip(&model.head.w).map(|(a, b)| a * b).sum::<f64>() + model.head.b
}

/// Model with the head blocks of every layer outside `keep` set to zero.
pub fn zero_masked(model: &AggregationModel<f64>, keep: &[usize]) -> AggregationModel<f64> {
    let mut m = model.clone();
    for i in 1..=m.num_layers() {
        if !keep.contains(&i) {
            m.head.block_mut(i).iter_mut().for_each(|w| *w = 0.0);
        }
    }
    m
}

/// Largest gradient error against central differences over every
/// trainable scalar: returns `(max_rel_err, n_checked)`.
pub fn finite_difference_check(model: &AggregationModel<f64>, image: &ImageTensor<f64>, label: u8) -> (f64, usize) {
    let loss = |m: &AggregationModel<f64>| laf_core::aggmodel::bce_with_logit(m.logit(image).unwrap(), label);
    let mut grads = model.zeros_like();
    model.loss_grad_full(image, label, &mut grads).unwrap();
    let mut analytic: Vec<(bool, Vec<f64>)> = Vec::new();
    grads.for_each_tensor(&mut |_, trainable, t| analytic.push((trainable, t.to_vec())));

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, (trainable, g)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (k, &ga) in g.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut idx = 0;
                m.for_each_tensor_mut(&mut |_, _, t| {
                    if idx == ti {
                        t[k] += delta;
                    }
                    idx += 1;
                });
                loss(&m)
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let denom = ga.abs().max(numeric.abs());
            let err = if denom < 1e-7 { (ga - numeric).abs() } else { (ga - numeric).abs() / denom };
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Toy set where fakes are brighter in the red channel.
pub fn toy_set(n: usize, seed: u64, size: usize) -> Vec<LabeledImage<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let image = ImageTensor::from_fn(size, size, 3, |_, _, c| {
                let base: f64 = rng.gen_range(0.0..0.7);
                if c == 0 && label == 1 {
                    base + 0.3
                } else {
                    base
                }
            });
            LabeledImage { image, label }
        })
        .collect()
}

/// Random eye configuration inside a `size x size` image.
pub fn random_landmarks(rng: &mut ChaCha8Rng, size: f64) -> LandmarkSet {
    let margin = 0.15 * size;
    let left_eye = [rng.gen_range(margin..size - margin), rng.gen_range(margin..size - margin)];
    let dist = rng.gen_range(10.0..0.4 * size);
    let angle: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let right_eye = [left_eye[0] + dist * angle.cos(), left_eye[1] + dist * angle.sin()];
    let mouth_center = [rng.gen_range(0.0..size), rng.gen_range(0.0..size)];
    LandmarkSet { left_eye, right_eye, mouth_center, face_box: [0.0, 0.0, size, size] }
}

/// Left-eye error of `align_left_eye`, measured two ways: through the
/// returned warp, and as the intensity centroid of a blob drawn at the eye.
pub fn alignment_errors(landmarks: &LandmarkSet, frame: &CanonicalFrame, size: usize) -> (f64, f64) {
    let [ex, ey] = landmarks.left_eye;
    let d = (landmarks.right_eye[0] - ex).hypot(landmarks.right_eye[1] - ey);
    let scale = frame.eye_distance / d;
    let sigma = (2.0 / scale).max(1.0);
    let image = ImageTensor::<f64>::from_fn(size, size, 1, |y, x, _| {
        let (px, py) = (x as f64 + 0.5 - ex, y as f64 + 0.5 - ey);
        (-(px * px + py * py) / (2.0 * sigma * sigma)).exp()
    });
    let (aligned, warp) = align_left_eye(&image, landmarks, frame).unwrap();
    let mapped = apply_affine(&warp, landmarks.left_eye);
    let [tx, ty] = frame.left_eye_target;
    let warp_err = (mapped[0] - tx).hypot(mapped[1] - ty);

    let reach = 6.0 * sigma * scale;
    let (mut w, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for y in 0..aligned.height() {
        for x in 0..aligned.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - tx).hypot(py - ty) <= reach {
                let v = aligned.get(y, x, 0);
                w += v;
                cx += v * px;
                cy += v * py;
            }
        }
    }
    let centroid_err = (cx / w - tx).hypot(cy / w - ty);
    (warp_err, centroid_err)
}
