//! Desk-scale cross-family study: generate, align, train one model per
//! family, evaluate the cross-family matrix, rank, profile, trim and
//! localise with Score-CAM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggmodel::{AggregationModel, ModelConfig, PooledFeatures};
use crate::analysis::{
    analysis_param_budget, ap_degradation, contributions, profile_from_contributions, region_means, score_cam,
    select_cam_layers, ImportanceProfile, ParamBudget, RankingCriterion, TrimPlan,
};
use crate::error::{invalid, Result};
use crate::eval::{matrix_from_scores, rank_matrix, ranking_csv, CovMode, CovSummary, ExperimentMatrix};
use crate::io::{save_gray_png, write_atomic, write_json};
use crate::preprocess::{preprocess_face, CanonicalFrame, CropMargins};
use crate::synthgen::{build_dataset, DatasetSpec, FamilyId, LandmarkSet, ManipulationFamily, Split};
use crate::tensor::LabeledImage;
use crate::train::{train, TrainConfig, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub seed: u64,
    pub families: Vec<FamilyId>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub image_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ranking_criterion: RankingCriterion,
    /// Trim sizes; values above the layer count are clamped to it.
    pub trim_sizes: Vec<usize>,
    pub cam_family: FamilyId,
    pub cam_fakes: usize,
    /// Heatmaps also written as PNG for this many fakes.
    pub cam_png: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            families: FamilyId::MANIPULATED.to_vec(),
            train_pairs: 200,
            val_pairs: 50,
            test_pairs: 50,
            image_size: crate::synthgen::DEFAULT_IMAGE_SIZE,
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            ranking_criterion: RankingCriterion::MeanAbs,
            trim_sizes: vec![1, 3, usize::MAX],
            cam_family: FamilyId::LocalBlend,
            cam_fakes: 50,
            cam_png: 4,
        }
    }
}

impl DeskConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.families.is_empty() || self.families.contains(&FamilyId::None) {
            return Err(invalid("families must be a non-empty list of manipulation families"));
        }
        if self.trim_sizes.iter().any(|&n| n == 0) {
            return Err(invalid("trim sizes must be positive"));
        }
        if self.cam_fakes > 0 && !self.families.contains(&self.cam_family) {
            return Err(invalid("cam_family must be one of the trained families"));
        }
        if self.model.backbone.input_size != CanonicalFrame::default().out_size {
            return Err(invalid("model input size must equal the aligned image size"));
        }
        Ok(())
    }
}

/// Aligned sample with its landmarks in aligned coordinates.
#[derive(Clone, Debug)]
pub struct AlignedSample {
    pub sample: LabeledImage<f32>,
    pub landmarks: LandmarkSet,
    /// Isotropic scale of the original-to-aligned warp.
    pub scale: f64,
}

pub fn aligned_split(family: &ManipulationFamily, n_pairs: usize, seed: u64, split: Split, image_size: usize) -> Result<Vec<AlignedSample>> {
    let mut spec = DatasetSpec::new(*family, n_pairs, seed, split);
    spec.image_size = image_size;
    let ds = build_dataset::<f32>(&spec)?;
    let frame = CanonicalFrame::default();
    ds.items
        .iter()
        .map(|it| {
            let p = preprocess_face(&it.image, &it.landmarks, CropMargins::default(), &frame)?;
            let scale = (p.warp[0] * p.warp[4] - p.warp[1] * p.warp[3]).abs().sqrt();
            Ok(AlignedSample { sample: LabeledImage { image: p.image, label: it.label }, landmarks: p.landmarks, scale })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRun {
    pub family: FamilyId,
    pub best_val_ap: f64,
    pub best_epoch: usize,
    pub history: TrainHistory,
    pub profile: ImportanceProfile,
    pub ranking: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimPoint {
    pub n: usize,
    pub ap_degradation: f64,
    pub matrix: ExperimentMatrix,
    /// One budget per trained model (matrix row).
    pub budgets: Vec<ParamBudget>,
    pub selected_layers: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamRecord {
    pub base_index: usize,
    pub layer: usize,
    pub inside_mean: f64,
    pub outside_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamSummary {
    pub family: FamilyId,
    pub n_images: usize,
    pub n_inside_wins: usize,
    pub win_fraction: f64,
    pub records: Vec<CamRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub config: DeskConfig,
    pub runs: Vec<FamilyRun>,
    pub matrix: ExperimentMatrix,
    pub ranking_include_all: Vec<(String, CovSummary)>,
    pub ranking_exclude_train: Vec<(String, CovSummary)>,
    pub trim_curve: Vec<TrimPoint>,
    pub cam: Option<CamSummary>,
}

/// Cached per-image contributions and labels of one (model, test set) cell.
struct CellCache {
    contributions: Vec<Vec<f64>>,
    bias: f64,
    labels: Vec<u8>,
}

impl CellCache {
    fn scores(&self, keep: Option<&[usize]>) -> Vec<f64> {
        self.contributions
            .iter()
            .map(|c| match keep {
                None => self.bias + c.iter().sum::<f64>(),
                Some(sel) => self.bias + sel.iter().map(|&i| c[i - 1]).sum::<f64>(),
            })
            .collect()
    }
}

fn cell_cache<'a>(model: &AggregationModel<f32>, set: impl Iterator<Item = &'a LabeledImage<f32>>) -> Result<CellCache> {
    let mut out = Vec::new();
    let mut labels = Vec::new();
    for s in set {
        let pooled: PooledFeatures<f32> = model.pooled_features(&s.image)?;
        out.push(contributions(model, &model.primitives_from_pooled(&pooled)?)?);
        labels.push(s.label);
    }
    Ok(CellCache { contributions: out, bias: model.head.b as f64, labels })
}

pub type Logger<'a> = &'a mut dyn FnMut(&str);

/// Trained models of a desk run, in family order.
pub struct DeskOutcome {
    pub report: DeskReport,
    pub models: Vec<(FamilyId, crate::checkpoint::Checkpoint)>,
    pub heatmaps: Vec<HeatmapArtifact>,
}

pub struct HeatmapArtifact {
    pub index: usize,
    pub heatmap: crate::analysis::Heatmap,
    pub logit: f64,
    pub contributions: Vec<f64>,
}

pub fn run_desk(config: &DeskConfig, log: Logger<'_>) -> Result<DeskOutcome> {
    config.validate()?;
    let names: Vec<String> = config.families.iter().map(|f| f.as_str().to_string()).collect();
    let mut tests = Vec::new();
    let mut runs = Vec::new();
    let mut models = Vec::new();
    let mut checkpoints = Vec::new();
    for &fam in &config.families {
        let family = fam.default_family();
        log(&format!("[{fam}] generating and aligning"));
        let tr = aligned_split(&family, config.train_pairs, config.seed, Split::Train, config.image_size)?;
        let va = aligned_split(&family, config.val_pairs, config.seed, Split::Val, config.image_size)?;
        tests.push(aligned_split(&family, config.test_pairs, config.seed, Split::Test, config.image_size)?);
        let init = AggregationModel::<f32>::init(&config.model, config.seed)?;
        let trs: Vec<_> = tr.into_iter().map(|s| s.sample).collect();
        let vas: Vec<_> = va.into_iter().map(|s| s.sample).collect();
        log(&format!("[{fam}] training on {} images", trs.len()));
        let outcome = train(&init, &trs, &vas, &config.train)?;
        let best_val_ap = outcome.checkpoint.train.as_ref().map_or(0.0, |m| m.best_val_ap);
        let best_epoch = outcome.checkpoint.train.as_ref().map_or(0, |m| m.best_epoch);
        log(&format!("[{fam}] best val AP {best_val_ap:.4} at epoch {best_epoch}"));
        let model = outcome.model;
        let vcache = cell_cache(&model, vas.iter())?;
        let profile = profile_from_contributions(&model, &vcache.contributions, &vcache.labels)?;
        let ranking = crate::analysis::rank_layers(&profile, config.ranking_criterion);
        let mut ckpt = outcome.checkpoint;
        if let Some(meta) = ckpt.train.as_mut() {
            meta.family = Some(fam.as_str().to_string());
        }
        checkpoints.push((fam, ckpt));
        runs.push(FamilyRun { family: fam, best_val_ap, best_epoch, history: outcome.history, profile, ranking });
        models.push(model);
    }

    log("evaluating cross-family matrix");
    let mut caches: Vec<Vec<CellCache>> = Vec::new();
    for m in &models {
        caches.push(tests.iter().map(|t| cell_cache(m, t.iter().map(|s| &s.sample))).collect::<Result<_>>()?);
    }
    let matrix = matrix_from_scores(names.clone(), names.clone(), |i, j| Ok((caches[i][j].scores(None), caches[i][j].labels.clone())));
    // excluding the train column needs at least two remaining columns
    let (ranking_include_all, ranking_exclude_train) = if names.len() >= 3 {
        (rank_matrix(&matrix, CovMode::IncludeAll)?, rank_matrix(&matrix, CovMode::ExcludeTrainColumn)?)
    } else {
        (Vec::new(), Vec::new())
    };

    let l = config.model.backbone.num_layers();
    let mut sizes: Vec<usize> = config.trim_sizes.iter().map(|&n| n.min(l)).collect();
    sizes.dedup();
    let mut trim_curve = Vec::new();
    for n in sizes {
        let mut plans = Vec::new();
        let mut budgets = Vec::new();
        for (m, run) in models.iter().zip(&runs) {
            let plan = TrimPlan::top_n(m, &run.profile, config.ranking_criterion, n)?;
            budgets.push(analysis_param_budget(m, &plan)?);
            plans.push(plan.selected_layers);
        }
        let trimmed = matrix_from_scores(names.clone(), names.clone(), |i, j| {
            Ok((caches[i][j].scores(Some(&plans[i])), caches[i][j].labels.clone()))
        });
        let deg = ap_degradation(&matrix, &trimmed)?;
        log(&format!("trim N={n}: AP degradation {deg:.4}"));
        trim_curve.push(TrimPoint { n, ap_degradation: deg, matrix: trimmed, budgets, selected_layers: plans });
    }

    let mut heatmaps = Vec::new();
    let cam = if config.cam_fakes > 0 {
        let fi = config.families.iter().position(|&f| f == config.cam_family).expect("validated");
        let model = &models[fi];
        let radius = match config.cam_family.default_family() {
            ManipulationFamily::LocalBlend { patch_radius } => Some(patch_radius),
            _ => None,
        };
        let fakes: Vec<(usize, &AlignedSample)> =
            tests[fi].iter().enumerate().filter(|(_, s)| s.sample.label == 1).take(config.cam_fakes).collect();
        log(&format!("Score-CAM on {} fakes", fakes.len()));
        let mut records = Vec::new();
        for (idx, s) in fakes {
            let layer = select_cam_layers(model, &s.sample.image, 1)?[0];
            let h = score_cam(model, &s.sample.image, layer)?;
            let (inside, outside) = match radius {
                Some(r) => {
                    let c = s.landmarks.mouth_center;
                    let rr = r * s.scale;
                    region_means(&h, |y, x| {
                        (x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2) <= rr * rr
                    })?
                }
                None => (f64::NAN, f64::NAN),
            };
            if heatmaps.len() < config.cam_png {
                let inf = model.infer(&s.sample.image)?;
                heatmaps.push(HeatmapArtifact {
                    index: idx,
                    logit: inf.logit as f64,
                    contributions: contributions(model, &inf.primitives)?,
                    heatmap: h,
                });
            }
            records.push(CamRecord { base_index: idx, layer, inside_mean: inside, outside_mean: outside });
        }
        let wins = records.iter().filter(|r| r.inside_mean > r.outside_mean).count();
        Some(CamSummary {
            family: config.cam_family,
            n_images: records.len(),
            n_inside_wins: wins,
            win_fraction: if records.is_empty() { 0.0 } else { wins as f64 / records.len() as f64 },
            records,
        })
    } else {
        None
    };

    let report = DeskReport { config: config.clone(), runs, matrix, ranking_include_all, ranking_exclude_train, trim_curve, cam };
    Ok(DeskOutcome { report, models: checkpoints, heatmaps })
}

pub fn trim_csv(points: &[TrimPoint]) -> String {
    let mut s = String::from("n,ap_degradation,mean_param_fraction\n");
    for p in points {
        let frac = p.budgets.iter().map(|b| b.fraction).sum::<f64>() / p.budgets.len() as f64;
        s.push_str(&format!("{},{:.6},{:.6}\n", p.n, p.ap_degradation, frac));
    }
    s
}

/// Write every artifact of a desk run under `dir`; returns the file list.
pub fn write_desk_outputs(outcome: &DeskOutcome, dir: &Path) -> Result<Vec<String>> {
    let r = &outcome.report;
    let mut files = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        write_atomic(&dir.join(&name), bytes)?;
        files.push(name);
        Ok(())
    };
    put("report.json".into(), (serde_json::to_string_pretty(r)? + "\n").as_bytes())?;
    put("matrix.csv".into(), r.matrix.to_csv().as_bytes())?;
    put("ranking_include_all.csv".into(), ranking_csv(&r.ranking_include_all).as_bytes())?;
    put("ranking_exclude_train_column.csv".into(), ranking_csv(&r.ranking_exclude_train).as_bytes())?;
    put("trim_curve.csv".into(), trim_csv(&r.trim_curve).as_bytes())?;
    for run in &r.runs {
        put(format!("importance_{}.csv", run.family), run.profile.to_csv().as_bytes())?;
    }
    for (fam, ck) in &outcome.models {
        put(format!("models/{fam}.ckpt"), &ck.to_bytes()?)?;
    }
    for a in &outcome.heatmaps {
        let h = &a.heatmap;
        let stem = format!("cam/fake_{:03}_layer{}", a.index, h.source_layer);
        save_gray_png(&h.values, h.width, h.height, &dir.join(format!("{stem}.png")))?;
        files.push(format!("{stem}.png"));
        write_json(&dir.join(format!("{stem}.json")), &heatmap_sidecar(h, a.logit, &a.contributions))?;
        files.push(format!("{stem}.json"));
    }
    files.sort();
    Ok(files)
}

/// JSON sidecar of a written heatmap.
pub fn heatmap_sidecar(h: &crate::analysis::Heatmap, logit: f64, contributions: &[f64]) -> serde_json::Value {
    serde_json::json!({
        "layer": h.source_layer,
        "height": h.height,
        "width": h.width,
        "logit": logit,
        "contributions": contributions,
    })
}
