//! Layer importance, importance-ranked trimming and Score-CAM heatmaps.

use serde::{Deserialize, Serialize};

use crate::aggmodel::{
    decompose_logit, AggregationModel, PooledFeatures, PrimitiveProjector, PrimitiveVector, PRIMITIVE_DIM,
};
use crate::backbone::Backbone;
use crate::error::{invalid, Error, Result};
use crate::eval::ExperimentMatrix;
use crate::scalar::{dot, Scalar};
use crate::tensor::{resize_plane, ImageTensor, LabeledImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer_index: usize,
    pub mean_real: f64,
    pub mean_fake: f64,
    /// Mean of `|c_i|` over all images of both classes.
    pub mean_abs: f64,
    /// Euclidean norm of the layer's head block.
    pub head_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub per_layer: Vec<LayerImportance>,
    pub n_real: usize,
    pub n_fake: usize,
}

impl ImportanceProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mean_real,mean_fake,mean_abs,head_norm\n");
        for l in &self.per_layer {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                l.layer_index, l.mean_real, l.mean_fake, l.mean_abs, l.head_norm
            ));
        }
        s
    }
}

/// Per-image logit contributions `c_i = w_i · p_i`.
pub fn contributions<T: Scalar>(model: &AggregationModel<T>, primitives: &[PrimitiveVector<T>]) -> Result<Vec<f64>> {
    Ok(decompose_logit(primitives, &model.head)?.contributions.iter().map(|c| c.as_f64()).collect())
}

/// Class-wise mean contributions from precomputed per-image contribution
/// vectors.
pub fn profile_from_contributions<T: Scalar>(
    model: &AggregationModel<T>,
    per_image: &[Vec<f64>],
    labels: &[u8],
) -> Result<ImportanceProfile> {
    let l = model.num_layers();
    if per_image.len() != labels.len() || per_image.iter().any(|c| c.len() != l) {
        return Err(invalid("contribution vectors do not match the labels or layer count"));
    }
    let n_fake = labels.iter().filter(|&&y| y == 1).count();
    let n_real = labels.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::InvalidDataset("importance profile needs real and fake images".into()));
    }
    let mut sum_real = vec![0.0; l];
    let mut sum_fake = vec![0.0; l];
    let mut sum_abs = vec![0.0; l];
    for (c, &y) in per_image.iter().zip(labels) {
        let dst = if y == 1 { &mut sum_fake } else { &mut sum_real };
        for i in 0..l {
            dst[i] += c[i];
            sum_abs[i] += c[i].abs();
        }
    }
    let per_layer = (0..l)
        .map(|i| LayerImportance {
            layer_index: i + 1,
            mean_real: sum_real[i] / n_real as f64,
            mean_fake: sum_fake[i] / n_fake as f64,
            mean_abs: sum_abs[i] / labels.len() as f64,
            head_norm: model.head.block(i + 1).iter().map(|w| w.as_f64().powi(2)).sum::<f64>().sqrt(),
        })
        .collect();
    Ok(ImportanceProfile { per_layer, n_real, n_fake })
}

pub fn layer_importance<T: Scalar>(model: &AggregationModel<T>, subset: &[LabeledImage<T>]) -> Result<ImportanceProfile> {
    let mut per_image = Vec::with_capacity(subset.len());
    for s in subset {
        per_image.push(contributions(model, &model.infer(&s.image)?.primitives)?);
    }
    let labels: Vec<u8> = subset.iter().map(|s| s.label).collect();
    profile_from_contributions(model, &per_image, &labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingCriterion {
    #[default]
    MeanAbs,
    FakeRealGap,
    HeadNorm,
}

impl RankingCriterion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean_abs" => Ok(Self::MeanAbs),
            "fake_real_gap" => Ok(Self::FakeRealGap),
            "head_norm" => Ok(Self::HeadNorm),
            other => Err(invalid(format!("unknown ranking criterion {other:?}"))),
        }
    }

    fn score(self, l: &LayerImportance) -> f64 {
        match self {
            Self::MeanAbs => l.mean_abs,
            Self::FakeRealGap => (l.mean_fake - l.mean_real).abs(),
            Self::HeadNorm => l.head_norm,
        }
    }
}

/// Layers by descending importance; equal scores keep the lower index first.
pub fn rank_layers(profile: &ImportanceProfile, criterion: RankingCriterion) -> Vec<usize> {
    let mut entries: Vec<(f64, usize)> = profile.per_layer.iter().map(|l| (criterion.score(l), l.layer_index)).collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    entries.into_iter().map(|e| e.1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimPlan {
    pub selected_layers: Vec<usize>,
    pub ranking_criterion: RankingCriterion,
    pub analysis_param_count_full: usize,
    pub analysis_param_count_trimmed: usize,
}

impl TrimPlan {
    pub fn new<T: Scalar>(
        model: &AggregationModel<T>,
        selected_layers: Vec<usize>,
        ranking_criterion: RankingCriterion,
    ) -> Result<Self> {
        let l = model.num_layers();
        if selected_layers.is_empty() {
            return Err(invalid("trim plan selects no layers"));
        }
        let mut seen = vec![false; l + 1];
        for &i in &selected_layers {
            if i == 0 || i > l || seen[i] {
                return Err(invalid(format!("invalid or duplicate layer {i} in trim plan")));
            }
            seen[i] = true;
        }
        let trimmed = selected_layers.iter().map(|&i| model.projectors[i - 1].parameter_count()).sum::<usize>()
            + PRIMITIVE_DIM * selected_layers.len()
            + 1;
        Ok(Self {
            selected_layers,
            ranking_criterion,
            analysis_param_count_full: model.analysis_parameter_count(),
            analysis_param_count_trimmed: trimmed,
        })
    }

    /// Keep the `n` most important layers of `profile`.
    pub fn top_n<T: Scalar>(
        model: &AggregationModel<T>,
        profile: &ImportanceProfile,
        criterion: RankingCriterion,
        n: usize,
    ) -> Result<Self> {
        if n == 0 || n > model.num_layers() {
            return Err(invalid(format!("cannot keep {n} of {} layers", model.num_layers())));
        }
        let ranked = rank_layers(profile, criterion);
        Self::new(model, ranked[..n].to_vec(), criterion)
    }
}

/// Reduced analysis network: only the selected projectors and head blocks.
#[derive(Clone, Debug)]
pub struct TrimmedModel<T> {
    pub backbone: Backbone<T>,
    pub selected_layers: Vec<usize>,
    pub projectors: Vec<PrimitiveProjector<T>>,
    pub head_blocks: Vec<Vec<T>>,
    pub bias: T,
    input_size: usize,
    depth: usize,
}

pub fn trim<T: Scalar>(model: &AggregationModel<T>, plan: &TrimPlan) -> Result<TrimmedModel<T>> {
    let plan = TrimPlan::new(model, plan.selected_layers.clone(), plan.ranking_criterion)?;
    let depth = *plan.selected_layers.iter().max().expect("non-empty");
    let mut backbone = model.backbone.clone();
    backbone.layers.truncate(depth);
    Ok(TrimmedModel {
        backbone,
        projectors: plan.selected_layers.iter().map(|&i| model.projectors[i - 1].clone()).collect(),
        head_blocks: plan.selected_layers.iter().map(|&i| model.head.block(i).to_vec()).collect(),
        bias: model.head.b,
        selected_layers: plan.selected_layers,
        input_size: model.input_size(),
        depth,
    })
}

impl<T: Scalar> TrimmedModel<T> {
    pub fn logit(&self, image: &ImageTensor<T>) -> Result<T> {
        if image.height() != self.input_size || image.width() != self.input_size {
            return Err(invalid("image size does not match the model"));
        }
        let taps = self.backbone.forward_prefix(&image.to_planar(), self.depth)?;
        let mut z = self.bias;
        for ((&i, proj), w) in self.selected_layers.iter().zip(&self.projectors).zip(&self.head_blocks) {
            z += dot(&proj.project(&taps[i - 1])?.values, w);
        }
        Ok(z)
    }

    /// Logit from pooled features of the untrimmed model.
    pub fn logit_pooled(&self, pooled: &PooledFeatures<T>) -> Result<T> {
        let mut z = self.bias;
        for ((&i, proj), w) in self.selected_layers.iter().zip(&self.projectors).zip(&self.head_blocks) {
            let x = pooled.per_layer.get(i - 1).ok_or_else(|| invalid("pooled features miss a layer"))?;
            z += dot(&proj.project_pooled(x)?.values, w);
        }
        Ok(z)
    }

    pub fn analysis_parameter_count(&self) -> usize {
        self.projectors.iter().map(PrimitiveProjector::parameter_count).sum::<usize>()
            + PRIMITIVE_DIM * self.head_blocks.len()
            + 1
    }
}

/// Mean absolute cell difference, in AP percentage points.
pub fn ap_degradation(full: &ExperimentMatrix, trimmed: &ExperimentMatrix) -> Result<f64> {
    if full.rows != trimmed.rows || full.cols != trimmed.cols {
        return Err(invalid("matrices differ in shape or labels"));
    }
    let (r, c) = full.shape();
    if r * c == 0 {
        return Err(invalid("empty matrices"));
    }
    let mut total = 0.0;
    for i in 0..r {
        let (a, b) = (full.row_values(i)?, trimmed.row_values(i)?);
        total += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / (r * c) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub full: usize,
    pub trimmed: usize,
    pub fraction: f64,
}

pub fn analysis_param_budget<T: Scalar>(model: &AggregationModel<T>, plan: &TrimPlan) -> Result<ParamBudget> {
    let plan = TrimPlan::new(model, plan.selected_layers.clone(), plan.ranking_criterion)?;
    Ok(ParamBudget {
        full: plan.analysis_param_count_full,
        trimmed: plan.analysis_param_count_trimmed,
        fraction: plan.analysis_param_count_trimmed as f64 / plan.analysis_param_count_full as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    pub source_layer: usize,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn min_max_normalize(v: &mut [f64]) -> bool {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi - lo <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    true
}

/// Score-CAM heatmap of `layer` (1-based) for the fake logit.
pub fn score_cam<T: Scalar>(model: &AggregationModel<T>, image: &ImageTensor<T>, layer: usize) -> Result<Heatmap> {
    if layer == 0 || layer > model.num_layers() {
        return Err(invalid(format!("layer {layer} out of range 1..={}", model.num_layers())));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let taps = model.backbone.forward_prefix(&image.to_planar(), layer)?;
    let fm = &taps[layer - 1].values;
    let mut maps: Vec<Vec<f64>> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    for c in 0..fm.channels {
        let plane: Vec<f64> = fm.plane(c).iter().map(|v| v.as_f64()).collect();
        let up = resize_plane(&plane, fm.height, fm.width, h, w);
        let mut mask = up.clone();
        if !min_max_normalize(&mut mask) {
            continue;
        }
        let mut masked = image.clone();
        for (px, &m) in masked.data_mut().chunks_mut(ch).zip(&mask) {
            px.iter_mut().for_each(|v| *v *= T::of(m));
        }
        scores.push(model.logit(&masked)?.as_f64());
        maps.push(up);
    }
    if maps.is_empty() {
        return Err(Error::DegenerateActivation(format!("every channel of layer {layer} is constant")));
    }
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut values = vec![0.0; h * w];
    for (m, e) in maps.iter().zip(&exps) {
        let wgt = e / z;
        values.iter_mut().zip(m).for_each(|(v, &x)| *v += wgt * x);
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    min_max_normalize(&mut values);
    Ok(Heatmap { height: h, width: w, values, source_layer: layer })
}

/// Top-`k` layers by signed contribution toward the fake class.
pub fn select_cam_layers<T: Scalar>(model: &AggregationModel<T>, image: &ImageTensor<T>, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > model.num_layers() {
        return Err(invalid(format!("k must lie in 1..={}", model.num_layers())));
    }
    let c = contributions(model, &model.infer(image)?.primitives)?;
    let mut idx: Vec<usize> = (1..=c.len()).collect();
    idx.sort_by(|&a, &b| c[b - 1].total_cmp(&c[a - 1]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Mean heatmap value inside and outside a region.
pub fn region_means(heatmap: &Heatmap, inside: impl Fn(usize, usize) -> bool) -> Result<(f64, f64)> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..heatmap.height {
        for x in 0..heatmap.width {
            if inside(y, x) {
                si += heatmap.at(y, x);
                ni += 1;
            } else {
                so += heatmap.at(y, x);
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(invalid("region must split the heatmap"));
    }
    Ok((si / ni as f64, so / no as f64))
}
