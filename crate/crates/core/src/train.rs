//! Deterministic BCE training with validation-AP model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggmodel::{AggregationModel, PooledFeatures};
use crate::checkpoint::{Checkpoint, TrainMetadata};
use crate::error::{invalid, Error, Result};
use crate::eval::average_precision;
use crate::scalar::Scalar;
use crate::tensor::LabeledImage;

/// Images used to estimate frozen batch-norm statistics.
pub const BN_CALIBRATION_IMAGES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub early_stop_patience: usize,
    /// Backpropagate into the backbone. Off by default: the backbone keeps
    /// its seeded initialisation with calibrated batch-norm statistics.
    pub train_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            early_stop_patience: 5,
            train_backbone: false,
        }
    }
}

impl TrainConfig {
    /// `epochs == 0` is allowed and returns the initial model.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(invalid("batch_size and early_stop_patience must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training BCE over the epoch's mini-batches.
    pub train_loss: f64,
    pub val_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation AP of the model before any update.
    pub initial_val_ap: f64,
    pub epochs: Vec<EpochRecord>,
    /// Mean BCE over the whole training set, before training and after each
    /// epoch, measured with the weights in effect at that point.
    pub train_set_loss: Vec<f64>,
}

pub struct TrainOutcome<T> {
    pub model: AggregationModel<T>,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

impl<T: Scalar> Optimizer<T> {
    fn new<S: Scalar>(kind: OptimizerKind, lr: f64, model: &AggregationModel<S>) -> Self {
        let mut first = Vec::new();
        model.for_each_tensor(&mut |_, _, t| first.push(vec![T::zero(); t.len()]));
        let second = if kind == OptimizerKind::Adam { first.clone() } else { Vec::new() };
        Self { kind, lr, step: 0, first, second }
    }

    fn apply(&mut self, model: &mut AggregationModel<T>, grads: &AggregationModel<T>, update_backbone: bool) {
        self.step += 1;
        let mut g_all: Vec<&[T]> = Vec::new();
        grads.for_each_tensor(&mut |_, _, t| g_all.push(t));
        let lr = T::of(self.lr);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::of(1.0 - BETA1.powi(self.step));
        let c2 = T::of(1.0 - BETA2.powi(self.step));
        let eps = T::of(ADAM_EPS);
        let mu = T::of(MOMENTUM);
        let mut idx = 0;
        let kind = self.kind;
        let (first, second) = (&mut self.first, &mut self.second);
        model.for_each_tensor_mut(&mut |name, trainable, p| {
            let k = idx;
            idx += 1;
            if !trainable || (!update_backbone && name.starts_with("backbone.")) {
                return;
            }
            let g = g_all[k];
            match kind {
                OptimizerKind::Adam => {
                    let (m, v) = (&mut first[k], &mut second[k]);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let m = &mut first[k];
                    for i in 0..p.len() {
                        m[i] = mu * m[i] + g[i];
                        p[i] -= lr * m[i];
                    }
                }
            }
        });
    }
}

fn check_labels<T>(set: &[LabeledImage<T>], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidDataset(format!("{what} set is empty")));
    }
    let pos = set.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == set.len() {
        return Err(Error::InvalidDataset(format!("{what} set has a single label; AP undefined")));
    }
    if set.iter().any(|s| s.label > 1) {
        return Err(Error::InvalidDataset(format!("{what} set has labels other than 0/1")));
    }
    Ok(())
}

/// Estimate batch-norm statistics from the first training images, then the
/// projector input standardisation from the whole training set. Returns the
/// training set's pooled features under the calibrated backbone.
pub fn calibrate_model<T: Scalar>(
    model: &mut AggregationModel<T>,
    train_set: &[LabeledImage<T>],
) -> Result<Vec<PooledFeatures<T>>> {
    let n = train_set.len().min(BN_CALIBRATION_IMAGES);
    let inputs: Vec<_> = train_set[..n].iter().map(|s| s.image.to_planar()).collect();
    model.backbone.calibrate_batch_norm(&inputs)?;
    let pooled = pooled_set(model, train_set)?;
    model.calibrate_inputs(&pooled)?;
    Ok(pooled)
}

fn pooled_set<T: Scalar>(model: &AggregationModel<T>, set: &[LabeledImage<T>]) -> Result<Vec<PooledFeatures<T>>> {
    set.iter().map(|s| model.pooled_features(&s.image)).collect()
}

enum Features<T> {
    Cached { train: Vec<PooledFeatures<T>>, val: Vec<PooledFeatures<T>> },
    Full,
}

fn val_ap<T: Scalar>(model: &AggregationModel<T>, feats: &Features<T>, val: &[LabeledImage<T>]) -> Result<f64> {
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = match feats {
        Features::Cached { val: vf, .. } => {
            vf.iter().map(|f| model.infer_pooled(f).map(|i| i.logit.as_f64())).collect::<Result<_>>()?
        }
        Features::Full => val.iter().map(|s| model.logit(&s.image).map(|z| z.as_f64())).collect::<Result<_>>()?,
    };
    Ok(average_precision(&scores, &labels)?.value)
}

fn train_set_loss<T: Scalar>(model: &AggregationModel<T>, feats: &Features<T>, train: &[LabeledImage<T>]) -> Result<f64> {
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let mut scratch = model.zeros_like();
    match feats {
        Features::Cached { train: tf, .. } => {
            let refs: Vec<&PooledFeatures<T>> = tf.iter().collect();
            Ok(model.loss_grad_pooled(&refs, &labels, &mut scratch)?.as_f64())
        }
        Features::Full => {
            let mut total = 0.0;
            for s in train {
                total += crate::aggmodel::bce_with_logit(model.logit(&s.image)?, s.label).as_f64();
            }
            Ok(total / train.len() as f64)
        }
    }
}

/// Train `model` in place semantics: the returned model carries the
/// best-validation-AP parameters.
pub fn train<T: Scalar>(
    model: &AggregationModel<T>,
    train_set: &[LabeledImage<T>],
    val_set: &[LabeledImage<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model.validate()?;
    check_labels(train_set, "training")?;
    check_labels(val_set, "validation")?;

    let mut current = model.clone();
    let train_pooled = calibrate_model(&mut current, train_set)?;
    let feats = if config.train_backbone {
        Features::Full
    } else {
        Features::Cached { train: train_pooled, val: pooled_set(&current, val_set)? }
    };

    let initial_val_ap = val_ap(&current, &feats, val_set)?;
    let mut history = TrainHistory { initial_val_ap, epochs: Vec::new(), train_set_loss: Vec::new() };
    history.train_set_loss.push(train_set_loss(&current, &feats, train_set)?);

    let mut best = current.clone();
    let (mut best_ap, mut best_epoch) = (initial_val_ap, 0usize);
    let mut stale = 0usize;
    let mut opt = Optimizer::<T>::new(config.optimizer, config.learning_rate, &current);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = current.zeros_like();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            grads.for_each_tensor_mut(&mut |_, _, t| t.iter_mut().for_each(|v| *v = T::zero()));
            let labels: Vec<u8> = chunk.iter().map(|&i| train_set[i].label).collect();
            let loss = match &feats {
                Features::Cached { train: tf, .. } => {
                    let batch: Vec<&PooledFeatures<T>> = chunk.iter().map(|&i| &tf[i]).collect();
                    current.loss_grad_pooled(&batch, &labels, &mut grads)?
                }
                Features::Full => {
                    let mut total = T::zero();
                    for &i in chunk {
                        total += current.loss_grad_full(&train_set[i].image, train_set[i].label, &mut grads)?;
                    }
                    let inv = T::one() / T::of(chunk.len() as f64);
                    grads.for_each_tensor_mut(&mut |_, _, t| t.iter_mut().for_each(|v| *v *= inv));
                    total * inv
                }
            };
            opt.apply(&mut current, &grads, config.train_backbone);
            loss_sum += loss.as_f64();
            batches += 1;
        }
        let ap = val_ap(&current, &feats, val_set)?;
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_ap: ap });
        history.train_set_loss.push(train_set_loss(&current, &feats, train_set)?);
        if ap > best_ap {
            best_ap = ap;
            best_epoch = epoch;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }

    let meta = TrainMetadata {
        config: config.clone(),
        seed: config.seed,
        best_val_ap: best_ap,
        best_epoch,
        epochs_run: history.epochs.len(),
        family: None,
    };
    let checkpoint = Checkpoint::new(best.cast::<f32>(), Some(meta))?;
    Ok(TrainOutcome { model: best, checkpoint, history })
}
