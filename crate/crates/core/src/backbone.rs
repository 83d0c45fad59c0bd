//! A small conv → batch-norm → ReLU stack whose forward pass exposes the
//! output of every layer.
//!
//! Batch-norm statistics are computed once per run by
//! [`Backbone::calibrate_batch_norm`] and then frozen, so each layer is a
//! fixed affine map after the convolution at both train and eval time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{FeatureMap, ImageTensor, Tensor3};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "three")]
    pub in_channels: usize,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
}

fn three() -> usize {
    3
}

impl BackboneConfig {
    /// The 8-layer desk configuration.
    pub fn desk_default() -> Self {
        let channels = [16, 16, 32, 32, 64, 64, 128, 128];
        let strides = [2, 1, 2, 1, 2, 1, 2, 1];
        Self {
            in_channels: 3,
            input_size: 256,
            layers: channels
                .iter()
                .zip(strides)
                .map(|(&out_channels, stride)| LayerSpec { out_channels, stride, kernel: 3, batch_norm: true })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(invalid("backbone needs at least two layers"));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(invalid("backbone input must be non-empty"));
        }
        let mut cumulative = 1usize;
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.kernel % 2 == 0 {
                return Err(invalid(format!("layer {}: kernel must be odd and channels positive", i + 1)));
            }
            if l.stride != 1 && l.stride != 2 {
                return Err(invalid(format!("layer {}: stride must be 1 or 2", i + 1)));
            }
            cumulative *= l.stride;
        }
        if cumulative > self.input_size {
            return Err(invalid("cumulative stride exceeds input size"));
        }
        Ok(())
    }

    /// `(channels, height, width)` of every tap, in order.
    pub fn output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut h = self.input_size;
        self.layers
            .iter()
            .map(|l| {
                h = conv_out(h, l.kernel, l.stride);
                (l.out_channels, h, h)
            })
            .collect()
    }

    /// Per-layer trainable parameter counts (conv weight + bias + BN affine).
    pub fn parameter_counts(&self) -> Vec<usize> {
        let mut in_c = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                let n = in_c * l.out_channels * l.kernel * l.kernel
                    + l.out_channels
                    + if l.batch_norm { 2 * l.out_channels } else { 0 };
                in_c = l.out_channels;
                n
            })
            .collect()
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(c: usize) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }

    fn inv_std(&self, c: usize) -> T {
        T::one() / (self.running_var[c] + T::of(BN_EPS)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_channels x (in_channels * kernel * kernel)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNorm<T>>,
}

/// Intermediate values kept for the backward pass of one layer.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    input_shape: (usize, usize, usize),
    cols: Vec<T>,
    conv: Vec<T>,
    pre_relu: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn init<R: Rng>(in_channels: usize, spec: &LayerSpec, rng: &mut R) -> Self {
        let fan_in = in_channels * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..spec.out_channels * fan_in).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Self {
            in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            weight,
            bias: vec![T::zero(); spec.out_channels],
            bn: spec.batch_norm.then(|| BatchNorm::new(spec.out_channels)),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.kernel, self.stride), conv_out(w, self.kernel, self.stride))
    }

    fn im2col(&self, input: &Tensor3<T>, oh: usize, ow: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.kernel / 2);
        let (h, w) = (input.height, input.width);
        let npix = oh * ow;
        let mut cols = vec![T::zero(); self.patch_len() * npix];
        for ci in 0..self.in_channels {
            let plane = input.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * npix..][..npix];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor3<T> {
        let (k, s, p) = (self.kernel, self.stride, self.kernel / 2);
        let (c, h, w) = shape;
        let npix = oh * ow;
        let mut out = Tensor3::zeros(c, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcols[((ci * k + ky) * k + kx) * npix..][..npix];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                *out.at_mut(ci, iy as usize, ix as usize) += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward_impl(&self, input: &Tensor3<T>, keep: bool) -> (Tensor3<T>, Option<LayerCache<T>>) {
        let (oh, ow) = self.output_size(input.height, input.width);
        let npix = oh * ow;
        let cols = self.im2col(input, oh, ow);
        let mut conv = vec![T::zero(); self.out_channels * npix];
        gemm(
            MatRef::new(&self.weight, self.out_channels, self.patch_len()),
            MatRef::new(&cols, self.patch_len(), npix),
            T::zero(),
            &mut conv,
        );
        for (oc, chunk) in conv.chunks_mut(npix).enumerate() {
            let b = self.bias[oc];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let mut act = conv.clone();
        if let Some(bn) = &self.bn {
            for (oc, chunk) in act.chunks_mut(npix).enumerate() {
                let scale = bn.gamma[oc] * bn.inv_std(oc);
                let shift = bn.beta[oc] - scale * bn.running_mean[oc];
                chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        let pre_relu = if keep { Some(act.clone()) } else { None };
        act.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let out = Tensor3 { channels: self.out_channels, height: oh, width: ow, data: act };
        let cache = pre_relu.map(|pre_relu| LayerCache { input_shape: input.shape(), cols, conv, pre_relu });
        (out, cache)
    }

    pub fn forward(&self, input: &Tensor3<T>) -> Tensor3<T> {
        self.forward_impl(input, false).0
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    fn backward(&self, cache: &LayerCache<T>, grad_out: &[T], grads: &mut ConvLayer<T>) -> Tensor3<T> {
        let (_, h, w) = cache.input_shape;
        let (oh, ow) = self.output_size(h, w);
        let npix = oh * ow;
        let mut dz: Vec<T> = grad_out
            .iter()
            .zip(&cache.pre_relu)
            .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
            .collect();
        if let (Some(bn), Some(gbn)) = (&self.bn, grads.bn.as_mut()) {
            for oc in 0..self.out_channels {
                let inv = bn.inv_std(oc);
                let mean = bn.running_mean[oc];
                let rows = oc * npix..(oc + 1) * npix;
                let mut dg = T::zero();
                let mut db = T::zero();
                for (d, &z) in dz[rows.clone()].iter().zip(&cache.conv[rows.clone()]) {
                    dg += *d * (z - mean) * inv;
                    db += *d;
                }
                gbn.gamma[oc] += dg;
                gbn.beta[oc] += db;
                let scale = bn.gamma[oc] * inv;
                dz[rows].iter_mut().for_each(|d| *d *= scale);
            }
        }
        for (oc, chunk) in dz.chunks(npix).enumerate() {
            grads.bias[oc] += chunk.iter().copied().sum::<T>();
        }
        let k = self.patch_len();
        gemm(
            MatRef::new(&dz, self.out_channels, npix),
            MatRef::new(&cache.cols, k, npix).t(),
            T::one(),
            &mut grads.weight,
        );
        let mut dcols = vec![T::zero(); k * npix];
        gemm(
            MatRef::new(&self.weight, self.out_channels, k).t(),
            MatRef::new(&dz, self.out_channels, npix),
            T::zero(),
            &mut dcols,
        );
        self.col2im(&dcols, cache.input_shape, oh, ow)
    }
}

/// Ordered tap-list protocol: any backbone that can report its per-layer
/// outputs can feed the aggregation head.
pub trait TapBackbone<T: Scalar> {
    fn num_taps(&self) -> usize;
    fn tap_shapes(&self) -> Vec<(usize, usize, usize)>;
    fn forward_taps(&self, image: &ImageTensor<T>) -> Result<Vec<FeatureMap<T>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub layers: Vec<ConvLayer<T>>,
}

/// Cached state of a full forward pass, for [`Backbone::backward`].
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Kaiming-uniform convolution weights, zero biases, identity batch-norm.
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.in_channels;
        let layers = config
            .layers
            .iter()
            .map(|spec| {
                let l = ConvLayer::init(in_c, spec, rng);
                in_c = spec.out_channels;
                l
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(&mut |_, _, t| t.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_counts().iter().sum()
    }

    fn check_input(&self, input: &Tensor3<T>) -> Result<()> {
        let s = self.config.input_size;
        if input.shape() != (self.config.in_channels, s, s) {
            return Err(invalid(format!(
                "backbone expects {}x{}x{} input, got {:?} (CxHxW)",
                self.config.in_channels,
                s,
                s,
                input.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_planar(&self, input: &Tensor3<T>) -> Result<Vec<FeatureMap<T>>> {
        self.check_input(input)?;
        let mut taps: Vec<FeatureMap<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let values = layer.forward(taps.last().map_or(input, |t| &t.values));
            taps.push(FeatureMap { layer_index: i + 1, values });
        }
        Ok(taps)
    }

    /// Forward up to and including layer `upto` (1-based).
    pub fn forward_prefix(&self, input: &Tensor3<T>, upto: usize) -> Result<Vec<FeatureMap<T>>> {
        self.check_input(input)?;
        if upto == 0 || upto > self.layers.len() {
            return Err(invalid(format!("layer prefix {upto} out of range")));
        }
        let mut taps: Vec<FeatureMap<T>> = Vec::with_capacity(upto);
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let values = layer.forward(taps.last().map_or(input, |t| &t.values));
            taps.push(FeatureMap { layer_index: i + 1, values });
        }
        Ok(taps)
    }

    pub fn forward_with_taps(&self, image: &ImageTensor<T>) -> Result<Vec<FeatureMap<T>>> {
        self.forward_planar(&image.to_planar())
    }

    /// Recompute layer `index` (1-based) from the previous tap.
    pub fn layer_forward(&self, index: usize, previous: &Tensor3<T>) -> Result<Tensor3<T>> {
        let layer = self
            .layers
            .get(index.wrapping_sub(1))
            .ok_or_else(|| invalid(format!("layer {index} out of range")))?;
        if previous.channels != layer.in_channels {
            return Err(invalid("previous tap has the wrong channel count"));
        }
        Ok(layer.forward(previous))
    }

    pub fn forward_train(&self, input: &Tensor3<T>) -> Result<(Vec<FeatureMap<T>>, BackboneCache<T>)> {
        self.check_input(input)?;
        let mut taps: Vec<FeatureMap<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (values, cache) = layer.forward_impl(taps.last().map_or(input, |t| &t.values), true);
            caches.push(cache.expect("cache requested"));
            taps.push(FeatureMap { layer_index: i + 1, values });
        }
        Ok((taps, BackboneCache { layers: caches }))
    }

    /// Backpropagate per-tap output gradients. Accumulates into `grads` and
    /// returns the gradient with respect to the input tensor.
    pub fn backward(&self, cache: &BackboneCache<T>, tap_grads: &[Vec<T>], grads: &mut Backbone<T>) -> Tensor3<T> {
        assert_eq!(tap_grads.len(), self.layers.len());
        let mut carried: Option<Tensor3<T>> = None;
        for i in (0..self.layers.len()).rev() {
            let mut g = tap_grads[i].clone();
            if let Some(c) = carried.take() {
                g.iter_mut().zip(&c.data).for_each(|(a, &b)| *a += b);
            }
            carried = Some(self.layers[i].backward(&cache.layers[i], &g, &mut grads.layers[i]));
        }
        carried.expect("at least one layer")
    }

    /// Compute and freeze batch-norm statistics from calibration inputs,
    /// layer by layer, using population mean and variance per channel.
    pub fn calibrate_batch_norm(&mut self, inputs: &[Tensor3<T>]) -> Result<()> {
        if inputs.is_empty() {
            return Err(invalid("batch-norm calibration needs at least one input"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let mut acts: Vec<Tensor3<T>> = inputs.to_vec();
        for li in 0..self.layers.len() {
            if self.layers[li].bn.is_some() {
                let oc = self.layers[li].out_channels;
                let mut bare = self.layers[li].clone();
                bare.bn = None;
                let mut sum = vec![0.0f64; oc];
                let mut sq = vec![0.0f64; oc];
                let mut n = 0usize;
                let mut convs = Vec::with_capacity(acts.len());
                for a in &acts {
                    let (_, cache) = bare.forward_impl(a, true);
                    let conv = cache.expect("cache").conv;
                    let npix = conv.len() / oc;
                    for (c, chunk) in conv.chunks(npix).enumerate() {
                        for &v in chunk {
                            let v = v.as_f64();
                            sum[c] += v;
                        }
                    }
                    n += npix;
                    convs.push(conv);
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                for conv in &convs {
                    let npix = conv.len() / oc;
                    for (c, chunk) in conv.chunks(npix).enumerate() {
                        for &v in chunk {
                            sq[c] += (v.as_f64() - mean[c]).powi(2);
                        }
                    }
                }
                let bn = self.layers[li].bn.as_mut().expect("checked");
                for c in 0..oc {
                    bn.running_mean[c] = T::of(mean[c]);
                    bn.running_var[c] = T::of(sq[c] / n as f64);
                }
            }
            let layer = &self.layers[li];
            acts = acts.iter().map(|a| layer.forward(a)).collect();
        }
        Ok(())
    }

    /// Visit every tensor with its canonical name and trainable flag.
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, bool, &'a [T])) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(format!("{p}.conv.weight"), true, &l.weight);
            f(format!("{p}.conv.bias"), true, &l.bias);
            if let Some(bn) = &l.bn {
                f(format!("{p}.bn.gamma"), true, &bn.gamma);
                f(format!("{p}.bn.beta"), true, &bn.beta);
                f(format!("{p}.bn.running_mean"), false, &bn.running_mean);
                f(format!("{p}.bn.running_var"), false, &bn.running_var);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, bool, &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(format!("{p}.conv.weight"), true, &mut l.weight);
            f(format!("{p}.conv.bias"), true, &mut l.bias);
            if let Some(bn) = &mut l.bn {
                f(format!("{p}.bn.gamma"), true, &mut bn.gamma);
                f(format!("{p}.bn.beta"), true, &mut bn.beta);
                f(format!("{p}.bn.running_mean"), false, &mut bn.running_mean);
                f(format!("{p}.bn.running_var"), false, &mut bn.running_var);
            }
        }
    }
}

impl<T: Scalar> TapBackbone<T> for Backbone<T> {
    fn num_taps(&self) -> usize {
        self.layers.len()
    }

    fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.config.output_shapes()
    }

    fn forward_taps(&self, image: &ImageTensor<T>) -> Result<Vec<FeatureMap<T>>> {
        self.forward_with_taps(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 2,
            input_size: 8,
            layers: vec![
                LayerSpec { out_channels: 3, stride: 2, kernel: 3, batch_norm: true },
                LayerSpec { out_channels: 2, stride: 1, kernel: 3, batch_norm: true },
            ],
        }
    }

    #[test]
    fn desk_shapes_follow_stride_arithmetic() {
        let cfg = BackboneConfig::desk_default();
        let spatial: Vec<usize> = cfg.output_shapes().iter().map(|s| s.1).collect();
        // oracle: halve on each stride-2 layer starting from 256
        let mut h: usize = 256;
        let oracle: Vec<usize> = cfg
            .layers
            .iter()
            .map(|l| {
                h = h.div_ceil(l.stride);
                h
            })
            .collect();
        assert_eq!(spatial, oracle);
        assert_eq!(spatial, vec![128, 128, 64, 64, 32, 32, 16, 16]);
    }

    #[test]
    fn parameter_count_closed_forms() {
        let one = BackboneConfig {
            in_channels: 3,
            input_size: 16,
            layers: vec![LayerSpec { out_channels: 16, stride: 1, kernel: 3, batch_norm: false }],
        };
        assert_eq!(one.parameter_counts(), vec![448]);
        let empty = BackboneConfig { in_channels: 3, input_size: 16, layers: vec![] };
        assert_eq!(empty.parameter_counts().iter().sum::<usize>(), 0);
        let desk = BackboneConfig::desk_default();
        let chans = [3, 16, 16, 32, 32, 64, 64, 128, 128];
        let oracle: usize = (0..8).map(|i| chans[i] * chans[i + 1] * 9 + 3 * chans[i + 1]).sum();
        assert_eq!(desk.parameter_counts().iter().sum::<usize>(), oracle);
        assert_eq!(oracle, 294_480);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = mini_config();
        c.layers.truncate(1);
        assert!(c.validate().is_err());
        let mut c = mini_config();
        c.layers[0].stride = 3;
        assert!(c.validate().is_err());
        let mut c = mini_config();
        c.input_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn taps_are_complete_deterministic_and_composable() {
        let cfg = mini_config();
        let bb = Backbone::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = ImageTensor::<f64>::from_fn(8, 8, 2, |y, x, c| ((y * 8 + x) as f64 * 0.1 + c as f64).sin());
        let taps = bb.forward_with_taps(&img).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps.iter().map(|t| t.layer_index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(taps, bb.forward_with_taps(&img).unwrap());
        let again = bb.layer_forward(2, &taps[0].values).unwrap();
        assert_eq!(again, taps[1].values);
        let wrong = ImageTensor::<f64>::zeros(9, 9, 2);
        assert!(bb.forward_with_taps(&wrong).is_err());
    }

    #[test]
    fn zero_weights_give_constant_maps() {
        let cfg = mini_config();
        let mut bb = Backbone::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (i, l) in bb.layers.iter_mut().enumerate() {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().enumerate().for_each(|(c, b)| *b = 0.1 * (c + i) as f64);
        }
        let img = ImageTensor::<f64>::from_fn(8, 8, 2, |y, x, _| (y * x) as f64 / 64.0);
        for tap in bb.forward_with_taps(&img).unwrap() {
            for c in 0..tap.values.channels {
                let p = tap.values.plane(c);
                assert!(p.iter().all(|&v| v == p[0]));
            }
        }
    }

    #[test]
    fn calibration_normalizes_conv_outputs() {
        let cfg = mini_config();
        let mut bb = Backbone::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let inputs: Vec<_> = (0..4)
            .map(|s| {
                ImageTensor::<f64>::from_fn(8, 8, 2, |y, x, c| (((y * 8 + x + c) * (s + 3)) as f64).sin() * 0.5 + 0.5)
                    .to_planar()
            })
            .collect();
        bb.calibrate_batch_norm(&inputs).unwrap();
        let bn = bb.layers[0].bn.as_ref().unwrap();
        assert!(bn.running_var.iter().all(|&v| v > 0.0));
        // post-calibration, the BN output of layer 1 has zero mean per channel
        let layer = bb.layers[0].clone();
        let mut acc = vec![0.0; 3];
        let mut n = 0.0;
        for x in &inputs {
            let (_, cache) = layer.forward_impl(x, true);
            let pre = cache.unwrap().pre_relu;
            for (c, ch) in pre.chunks(16).enumerate() {
                acc[c] += ch.iter().sum::<f64>();
            }
            n += 16.0;
        }
        for a in acc {
            assert!((a / n).abs() < 1e-9);
        }
    }
}
