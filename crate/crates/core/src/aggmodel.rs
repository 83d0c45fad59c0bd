//! Primitive projection blocks and the linear aggregation head.
//!
//! Every backbone tap `o_i` is average-pooled, flattened and fed to a
//! three-layer MLP producing a 10-dim primitive `p_i`. The head is a single
//! affine map over the concatenation `[p_1, ..., p_L]`; its pre-sigmoid
//! output is the logit, which decomposes exactly into per-layer terms
//! `w_i · p_i` plus the bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{invalid, Result};
use crate::scalar::{dot, gemm, sigmoid, MatRef, Scalar};
use crate::tensor::{FeatureMap, ImageTensor, Tensor3};

pub const PRIMITIVE_DIM: usize = 10;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Variance floor of the pooled-input standardisation.
pub const INPUT_NORM_EPS: f64 = 1e-5;

/// Target pooled spatial extent used to pick default pool windows.
const POOLED_EXTENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default = "default_hidden")]
    pub hidden_dims: [usize; 2],
    /// Per-layer pool windows; `None` picks `ceil(H / 4)` per layer.
    #[serde(default)]
    pub pool_windows: Option<Vec<usize>>,
}

fn default_hidden() -> [usize; 2] {
    [128, 32]
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        Self { backbone, hidden_dims: default_hidden(), pool_windows: None }
    }

    pub fn desk_default() -> Self {
        Self::new(BackboneConfig::desk_default())
    }

    pub fn resolved_pool_windows(&self) -> Result<Vec<usize>> {
        let shapes = self.backbone.output_shapes();
        match &self.pool_windows {
            Some(w) => {
                if w.len() != shapes.len() || w.iter().any(|&v| v == 0) {
                    return Err(invalid("pool_windows must give one positive window per layer"));
                }
                Ok(w.clone())
            }
            None => Ok(shapes.iter().map(|&(_, h, _)| h.div_ceil(POOLED_EXTENT).max(1)).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(invalid("hidden dims must be positive"));
        }
        self.resolved_pool_windows().map(|_| ())
    }
}

/// Fully connected layer, `weight` is `out_dim x in_dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| T::of(rng.gen_range(-bound..bound))).collect(),
            bias: vec![T::zero(); out_dim],
        }
    }

    fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `x` is `n x in_dim`; returns `n x out_dim`.
    fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * self.out_dim];
        gemm(
            MatRef::new(x, n, self.in_dim),
            MatRef::new(&self.weight, self.out_dim, self.in_dim).t(),
            T::zero(),
            &mut y,
        );
        for row in y.chunks_mut(self.out_dim) {
            row.iter_mut().zip(&self.bias).for_each(|(v, &b)| *v += b);
        }
        y
    }

    /// Accumulate parameter gradients, return the input gradient.
    fn backward(&self, x: &[T], dy: &[T], n: usize, grads: &mut Dense<T>) -> Vec<T> {
        gemm(
            MatRef::new(dy, n, self.out_dim).t(),
            MatRef::new(x, n, self.in_dim),
            T::one(),
            &mut grads.weight,
        );
        for row in dy.chunks(self.out_dim) {
            grads.bias.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
        }
        let mut dx = vec![T::zero(); n * self.in_dim];
        gemm(
            MatRef::new(dy, n, self.out_dim),
            MatRef::new(&self.weight, self.out_dim, self.in_dim),
            T::zero(),
            &mut dx,
        );
        dx
    }
}

/// Non-overlapping average pooling; border windows are averaged over the
/// cells they actually cover.
pub fn avg_pool2d<T: Scalar>(t: &Tensor3<T>, window: usize) -> Tensor3<T> {
    let ph = t.height.div_ceil(window);
    let pw = t.width.div_ceil(window);
    let mut out = Tensor3::zeros(t.channels, ph, pw);
    for c in 0..t.channels {
        for py in 0..ph {
            let ys = py * window..((py + 1) * window).min(t.height);
            for px in 0..pw {
                let xs = px * window..((px + 1) * window).min(t.width);
                let mut acc = T::zero();
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += t.at(c, y, x);
                    }
                }
                *out.at_mut(c, py, px) = acc / T::of((ys.len() * xs.len()) as f64);
            }
        }
    }
    out
}

fn avg_pool2d_backward<T: Scalar>(grad: &[T], shape: (usize, usize, usize), window: usize) -> Vec<T> {
    let (c, h, w) = shape;
    let ph = h.div_ceil(window);
    let pw = w.div_ceil(window);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for py in 0..ph {
            let ys = py * window..((py + 1) * window).min(h);
            for px in 0..pw {
                let xs = px * window..((px + 1) * window).min(w);
                let g = grad[(ci * ph + py) * pw + px] / T::of((ys.len() * xs.len()) as f64);
                for y in ys.clone() {
                    for x in xs.clone() {
                        out[(ci * h + y) * w + x] = g;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveVector<T> {
    pub layer_index: usize,
    pub values: [T; PRIMITIVE_DIM],
}

impl<T: Scalar> PrimitiveVector<T> {
    pub fn zeros(layer_index: usize) -> Self {
        Self { layer_index, values: [T::zero(); PRIMITIVE_DIM] }
    }
}

/// Activations retained by a batched MLP pass.
struct MlpCache<T> {
    x: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
}

/// Pool → flatten → FC → ReLU → FC → ReLU → FC, producing 10 primitives.
///
/// The pooled vector is standardised with frozen per-feature statistics
/// before the first FC layer; this is an affine map that could be folded
/// into that layer, kept separate so training sees centred inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveProjector<T> {
    pub layer_index: usize,
    pub pool_window: usize,
    /// `(channels, height, width)` of the tap this block consumes.
    pub input_shape: (usize, usize, usize),
    pub input_mean: Vec<T>,
    pub input_scale: Vec<T>,
    pub fc: [Dense<T>; 3],
}

impl<T: Scalar> PrimitiveProjector<T> {
    pub fn init<R: Rng>(
        layer_index: usize,
        input_shape: (usize, usize, usize),
        pool_window: usize,
        hidden: [usize; 2],
        rng: &mut R,
    ) -> Self {
        let d_in = pooled_len(input_shape, pool_window);
        Self {
            layer_index,
            pool_window,
            input_shape,
            input_mean: vec![T::zero(); d_in],
            input_scale: vec![T::one(); d_in],
            fc: [
                Dense::init(d_in, hidden[0], rng),
                Dense::init(hidden[0], hidden[1], rng),
                Dense::init(hidden[1], PRIMITIVE_DIM, rng),
            ],
        }
    }

    /// `C * ceil(H / pool) * ceil(W / pool)`.
    pub fn d_in(&self) -> usize {
        pooled_len(self.input_shape, self.pool_window)
    }

    pub fn parameter_count(&self) -> usize {
        self.fc.iter().map(Dense::parameter_count).sum()
    }

    fn check(&self, feature: &FeatureMap<T>) -> Result<()> {
        if feature.layer_index != self.layer_index {
            return Err(invalid(format!(
                "projector {} received feature of layer {}",
                self.layer_index, feature.layer_index
            )));
        }
        if feature.values.shape() != self.input_shape {
            return Err(invalid(format!(
                "projector {} expects {:?}, got {:?}",
                self.layer_index,
                self.input_shape,
                feature.values.shape()
            )));
        }
        Ok(())
    }

    /// Pooled and flattened input of the MLP.
    pub fn pool(&self, feature: &FeatureMap<T>) -> Result<Vec<T>> {
        self.check(feature)?;
        Ok(avg_pool2d(&feature.values, self.pool_window).data)
    }

    /// Set the input standardisation from pooled training rows
    /// (`n x d_in`), using population statistics.
    pub fn calibrate_input(&mut self, pooled: &[T], n: usize) -> Result<()> {
        let d = self.d_in();
        if n == 0 || pooled.len() != n * d {
            return Err(invalid("calibration rows do not match the projector input"));
        }
        let mut mean = vec![0.0f64; d];
        for row in pooled.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for row in pooled.chunks(d) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v.as_f64() - m).powi(2));
        }
        for k in 0..d {
            self.input_mean[k] = T::of(mean[k]);
            self.input_scale[k] = T::of(1.0 / (var[k] / n as f64 + INPUT_NORM_EPS).sqrt());
        }
        Ok(())
    }

    fn mlp_forward(&self, x: &[T], n: usize) -> (Vec<T>, MlpCache<T>) {
        let relu = |v: Vec<T>| v.into_iter().map(|a| a.max(T::zero())).collect::<Vec<_>>();
        let d = self.d_in();
        let xs: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - self.input_mean[k % d]) * self.input_scale[k % d])
            .collect();
        let h1 = relu(self.fc[0].forward(&xs, n));
        let h2 = relu(self.fc[1].forward(&h1, n));
        let out = self.fc[2].forward(&h2, n);
        (out, MlpCache { x: xs, h1, h2 })
    }

    fn mlp_backward(&self, cache: &MlpCache<T>, dout: &[T], n: usize, grads: &mut Self) -> Vec<T> {
        let mask = |d: Vec<T>, act: &[T]| {
            d.into_iter().zip(act).map(|(g, &a)| if a > T::zero() { g } else { T::zero() }).collect::<Vec<_>>()
        };
        let [g0, g1, g2] = &mut grads.fc;
        let dh2 = mask(self.fc[2].backward(&cache.h2, dout, n, g2), &cache.h2);
        let dh1 = mask(self.fc[1].backward(&cache.h1, &dh2, n, g1), &cache.h1);
        let d = self.d_in();
        let mut dx = self.fc[0].backward(&cache.x, &dh1, n, g0);
        dx.iter_mut().enumerate().for_each(|(k, g)| *g *= self.input_scale[k % d]);
        dx
    }

    /// Projection of already-pooled inputs, `n` rows at once.
    pub fn project_pooled_batch(&self, pooled: &[T], n: usize) -> Result<Vec<PrimitiveVector<T>>> {
        if pooled.len() != n * self.d_in() {
            return Err(invalid(format!(
                "projector {} expects {} pooled values per row",
                self.layer_index,
                self.d_in()
            )));
        }
        let (out, _) = self.mlp_forward(pooled, n);
        Ok(out
            .chunks(PRIMITIVE_DIM)
            .map(|c| {
                let mut values = [T::zero(); PRIMITIVE_DIM];
                values.copy_from_slice(c);
                PrimitiveVector { layer_index: self.layer_index, values }
            })
            .collect())
    }

    pub fn project_pooled(&self, pooled: &[T]) -> Result<PrimitiveVector<T>> {
        Ok(self.project_pooled_batch(pooled, 1)?.remove(0))
    }

    pub fn project(&self, feature: &FeatureMap<T>) -> Result<PrimitiveVector<T>> {
        let pooled = self.pool(feature)?;
        self.project_pooled(&pooled)
    }
}

fn pooled_len((c, h, w): (usize, usize, usize), window: usize) -> usize {
    c * h.div_ceil(window) * w.div_ceil(window)
}

/// Linear head over the concatenated primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationHead<T> {
    /// `10 * L` weights; block `i` (0-based) belongs to layer `i + 1`.
    pub w: Vec<T>,
    pub b: T,
}

impl<T: Scalar> AggregationHead<T> {
    pub fn zeros(num_layers: usize) -> Self {
        Self { w: vec![T::zero(); PRIMITIVE_DIM * num_layers], b: T::zero() }
    }

    pub fn num_layers(&self) -> usize {
        self.w.len() / PRIMITIVE_DIM
    }

    /// Weights bound to layer `index` (1-based).
    pub fn block(&self, index: usize) -> &[T] {
        &self.w[(index - 1) * PRIMITIVE_DIM..index * PRIMITIVE_DIM]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.w[(index - 1) * PRIMITIVE_DIM..index * PRIMITIVE_DIM]
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + 1
    }
}

fn check_primitives<T: Scalar>(primitives: &[PrimitiveVector<T>], head: &AggregationHead<T>) -> Result<()> {
    if head.w.len() % PRIMITIVE_DIM != 0 {
        return Err(invalid("head weight length is not a multiple of the primitive size"));
    }
    if primitives.len() != head.num_layers() {
        return Err(invalid(format!(
            "expected primitives for {} layers, got {}",
            head.num_layers(),
            primitives.len()
        )));
    }
    for (i, p) in primitives.iter().enumerate() {
        if p.layer_index != i + 1 {
            return Err(invalid(format!(
                "primitive at position {} belongs to layer {} (missing or duplicated layer)",
                i + 1,
                p.layer_index
            )));
        }
    }
    Ok(())
}

/// `logit = w · [p_1, ..., p_L] + b` and its sigmoid.
pub fn aggregate<T: Scalar>(primitives: &[PrimitiveVector<T>], head: &AggregationHead<T>) -> Result<(T, T)> {
    check_primitives(primitives, head)?;
    let logit = primitives
        .iter()
        .flat_map(|p| p.values.iter())
        .zip(&head.w)
        .fold(T::zero(), |acc, (&p, &w)| acc + p * w)
        + head.b;
    Ok((logit, sigmoid(logit)))
}

/// Per-layer logit terms `c_i = w_i · p_i` and the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitDecomposition<T> {
    pub contributions: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> LogitDecomposition<T> {
    pub fn total(&self) -> T {
        self.contributions.iter().fold(T::zero(), |a, &c| a + c) + self.bias
    }
}

pub fn decompose_logit<T: Scalar>(
    primitives: &[PrimitiveVector<T>],
    head: &AggregationHead<T>,
) -> Result<LogitDecomposition<T>> {
    check_primitives(primitives, head)?;
    Ok(LogitDecomposition {
        contributions: primitives.iter().map(|p| dot(&p.values, head.block(p.layer_index))).collect(),
        bias: head.b,
    })
}

/// Binary cross-entropy on a probability, clamped away from 0 and 1.
pub fn bce_loss<T: Scalar>(probability: T, label: u8) -> T {
    let eps = T::of(BCE_CLAMP);
    let s = probability.max(eps).min(T::one() - eps);
    if label == 1 {
        -s.ln()
    } else {
        -(T::one() - s).ln()
    }
}

/// Binary cross-entropy evaluated from the logit: `max(z,0) - z*l + ln(1+e^-|z|)`.
pub fn bce_with_logit<T: Scalar>(logit: T, label: u8) -> T {
    let l = if label == 1 { T::one() } else { T::zero() };
    logit.max(T::zero()) - logit * l + (-logit.abs()).exp().ln_1p()
}

/// Pooled projector inputs of one image, one vector per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatures<T> {
    pub per_layer: Vec<Vec<T>>,
}

/// Result of running the full model on one image.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub primitives: Vec<PrimitiveVector<T>>,
    pub logit: T,
    pub probability: T,
}

/// Backbone, one projector per tap, and the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationModel<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub projectors: Vec<PrimitiveProjector<T>>,
    pub head: AggregationHead<T>,
}

impl<T: Scalar> AggregationModel<T> {
    /// Kaiming-uniform conv/FC weights, zero biases and a zero head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&config.backbone, &mut rng)?;
        let windows = config.resolved_pool_windows()?;
        let projectors = config
            .backbone
            .output_shapes()
            .into_iter()
            .zip(windows)
            .enumerate()
            .map(|(i, (shape, win))| PrimitiveProjector::init(i + 1, shape, win, config.hidden_dims, &mut rng))
            .collect::<Vec<_>>();
        let head = AggregationHead::zeros(projectors.len());
        Ok(Self { config: config.clone(), backbone, projectors, head })
    }

    pub fn num_layers(&self) -> usize {
        self.projectors.len()
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    /// Checks the structural invariants after construction or loading.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let l = self.config.backbone.num_layers();
        if self.backbone.num_layers() != l || self.projectors.len() != l || self.head.w.len() != PRIMITIVE_DIM * l {
            return Err(invalid("model parts disagree on the layer count"));
        }
        let shapes = self.config.backbone.output_shapes();
        for (i, p) in self.projectors.iter().enumerate() {
            let d = p.d_in();
            if p.layer_index != i + 1
                || p.input_shape != shapes[i]
                || p.input_mean.len() != d
                || p.input_scale.len() != d
            {
                return Err(invalid(format!("projector {} does not match its layer", i + 1)));
            }
        }
        Ok(())
    }

    /// Fit every projector's input standardisation to `pooled`.
    pub fn calibrate_inputs(&mut self, pooled: &[PooledFeatures<T>]) -> Result<()> {
        for (i, p) in self.projectors.iter_mut().enumerate() {
            let mut rows = Vec::with_capacity(pooled.len() * p.d_in());
            for f in pooled {
                match f.per_layer.get(i) {
                    Some(r) if r.len() == p.d_in() => rows.extend_from_slice(r),
                    _ => return Err(invalid("pooled features do not match the model")),
                }
            }
            p.calibrate_input(&rows, pooled.len())?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(&mut |_, _, t| t.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// Trainable parameters of the projectors plus the head.
    pub fn analysis_parameter_count(&self) -> usize {
        self.projectors.iter().map(PrimitiveProjector::parameter_count).sum::<usize>() + self.head.parameter_count()
    }

    fn check_image(&self, image: &ImageTensor<T>) -> Result<()> {
        let s = self.input_size();
        if image.height() != s || image.width() != s || image.channels() != self.config.backbone.in_channels {
            return Err(invalid(format!(
                "model expects {s}x{s}x{} images, got {}x{}x{}",
                self.config.backbone.in_channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    pub fn pooled_features(&self, image: &ImageTensor<T>) -> Result<PooledFeatures<T>> {
        self.check_image(image)?;
        let taps = self.backbone.forward_with_taps(image)?;
        let per_layer = taps.iter().zip(&self.projectors).map(|(t, p)| p.pool(t)).collect::<Result<_>>()?;
        Ok(PooledFeatures { per_layer })
    }

    pub fn primitives_from_pooled(&self, pooled: &PooledFeatures<T>) -> Result<Vec<PrimitiveVector<T>>> {
        if pooled.per_layer.len() != self.projectors.len() {
            return Err(invalid("pooled features cover the wrong number of layers"));
        }
        self.projectors.iter().zip(&pooled.per_layer).map(|(p, x)| p.project_pooled(x)).collect()
    }

    pub fn infer_pooled(&self, pooled: &PooledFeatures<T>) -> Result<Inference<T>> {
        let primitives = self.primitives_from_pooled(pooled)?;
        let (logit, probability) = aggregate(&primitives, &self.head)?;
        Ok(Inference { primitives, logit, probability })
    }

    pub fn infer(&self, image: &ImageTensor<T>) -> Result<Inference<T>> {
        self.infer_pooled(&self.pooled_features(image)?)
    }

    pub fn logit(&self, image: &ImageTensor<T>) -> Result<T> {
        Ok(self.infer(image)?.logit)
    }

    /// Mean BCE over a batch of cached pooled features; gradients of the
    /// projectors and head (averaged over the batch) are added to `grads`.
    pub fn loss_grad_pooled(&self, batch: &[&PooledFeatures<T>], labels: &[u8], grads: &mut Self) -> Result<T> {
        let n = batch.len();
        if n == 0 || labels.len() != n {
            return Err(invalid("batch and labels must be non-empty and equally long"));
        }
        let l = self.num_layers();
        let mut outs = Vec::with_capacity(l);
        let mut caches = Vec::with_capacity(l);
        for (li, proj) in self.projectors.iter().enumerate() {
            let d = proj.d_in();
            let mut x = Vec::with_capacity(n * d);
            for f in batch {
                if f.per_layer.len() != l || f.per_layer[li].len() != d {
                    return Err(invalid("pooled features do not match the model"));
                }
                x.extend_from_slice(&f.per_layer[li]);
            }
            let (out, cache) = proj.mlp_forward(&x, n);
            outs.push(out);
            caches.push(cache);
        }
        let inv_n = T::one() / T::of(n as f64);
        let mut loss = T::zero();
        let mut dlogits = Vec::with_capacity(n);
        for (s, &label) in labels.iter().enumerate() {
            let mut z = self.head.b;
            for (li, out) in outs.iter().enumerate() {
                z += dot(&out[s * PRIMITIVE_DIM..(s + 1) * PRIMITIVE_DIM], self.head.block(li + 1));
            }
            loss += bce_with_logit(z, label);
            let target = if label == 1 { T::one() } else { T::zero() };
            dlogits.push((sigmoid(z) - target) * inv_n);
        }
        for (li, (proj, out)) in self.projectors.iter().zip(&outs).enumerate() {
            let wblock = self.head.block(li + 1).to_vec();
            let mut dout = vec![T::zero(); n * PRIMITIVE_DIM];
            let gblock = grads.head.block_mut(li + 1);
            for (s, &dz) in dlogits.iter().enumerate() {
                for k in 0..PRIMITIVE_DIM {
                    gblock[k] += dz * out[s * PRIMITIVE_DIM + k];
                    dout[s * PRIMITIVE_DIM + k] = dz * wblock[k];
                }
            }
            proj.mlp_backward(&caches[li], &dout, n, &mut grads.projectors[li]);
        }
        grads.head.b += dlogits.iter().fold(T::zero(), |a, &d| a + d);
        Ok(loss * inv_n)
    }

    /// BCE of one image with gradients of every parameter, backbone
    /// included, added to `grads`.
    pub fn loss_grad_full(&self, image: &ImageTensor<T>, label: u8, grads: &mut Self) -> Result<T> {
        self.check_image(image)?;
        let (taps, bcache) = self.backbone.forward_train(&image.to_planar())?;
        let mut outs = Vec::with_capacity(taps.len());
        let mut caches = Vec::with_capacity(taps.len());
        for (t, proj) in taps.iter().zip(&self.projectors) {
            let pooled = proj.pool(t)?;
            let (out, cache) = proj.mlp_forward(&pooled, 1);
            outs.push(out);
            caches.push(cache);
        }
        let mut z = self.head.b;
        for (li, out) in outs.iter().enumerate() {
            z += dot(out, self.head.block(li + 1));
        }
        let loss = bce_with_logit(z, label);
        let target = if label == 1 { T::one() } else { T::zero() };
        let dz = sigmoid(z) - target;
        let mut tap_grads = Vec::with_capacity(taps.len());
        for (li, proj) in self.projectors.iter().enumerate() {
            let wblock = self.head.block(li + 1).to_vec();
            let gblock = grads.head.block_mut(li + 1);
            let dout: Vec<T> = (0..PRIMITIVE_DIM)
                .map(|k| {
                    gblock[k] += dz * outs[li][k];
                    dz * wblock[k]
                })
                .collect();
            let dpooled = proj.mlp_backward(&caches[li], &dout, 1, &mut grads.projectors[li]);
            tap_grads.push(avg_pool2d_backward(&dpooled, proj.input_shape, proj.pool_window));
        }
        grads.head.b += dz;
        self.backbone.backward(&bcache, &tap_grads, &mut grads.backbone);
        Ok(loss)
    }

    /// Visit every tensor with its canonical name and trainable flag.
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, bool, &'a [T])) {
        self.backbone.for_each_tensor(f);
        for (i, p) in self.projectors.iter().enumerate() {
            f(format!("projectors.{i}.norm.mean"), false, &p.input_mean);
            f(format!("projectors.{i}.norm.scale"), false, &p.input_scale);
            for (j, fc) in p.fc.iter().enumerate() {
                f(format!("projectors.{i}.fc{j}.weight"), true, &fc.weight);
                f(format!("projectors.{i}.fc{j}.bias"), true, &fc.bias);
            }
        }
        f("head.w".into(), true, &self.head.w);
        f("head.b".into(), true, std::slice::from_ref(&self.head.b));
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, bool, &mut [T])) {
        self.backbone.for_each_tensor_mut(f);
        for (i, p) in self.projectors.iter_mut().enumerate() {
            f(format!("projectors.{i}.norm.mean"), false, &mut p.input_mean);
            f(format!("projectors.{i}.norm.scale"), false, &mut p.input_scale);
            for (j, fc) in p.fc.iter_mut().enumerate() {
                f(format!("projectors.{i}.fc{j}.weight"), true, &mut fc.weight);
                f(format!("projectors.{i}.fc{j}.bias"), true, &mut fc.bias);
            }
        }
        f("head.w".into(), true, &mut self.head.w);
        f("head.b".into(), true, std::slice::from_mut(&mut self.head.b));
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> AggregationModel<U> {
        let mut out = AggregationModel::<U>::init(&self.config, 0).expect("config already validated");
        let mut src: Vec<Vec<f64>> = Vec::new();
        self.for_each_tensor(&mut |_, _, t| src.push(t.iter().map(|v| v.as_f64()).collect()));
        let mut it = src.into_iter();
        out.for_each_tensor_mut(&mut |_, _, t| {
            let v = it.next().expect("same structure");
            t.iter_mut().zip(v).for_each(|(d, s)| *d = U::of(s));
        });
        out
    }
}
