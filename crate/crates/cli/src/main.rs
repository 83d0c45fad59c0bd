//! `laf`: command-line front end for the layer-aggregation toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use laf_core::aggmodel::{AggregationModel, ModelConfig};
use laf_core::analysis::{
    analysis_param_budget, ap_degradation, contributions, layer_importance, rank_layers, score_cam, select_cam_layers,
    trim, RankingCriterion, TrimPlan,
};
use laf_core::checkpoint::{Checkpoint, TrainMetadata};
use laf_core::eval::{
    matrix_from_scores, rank_fixture_table, rank_matrix, ranking_csv, reproduce_paper_summaries, score_dataset,
    CovMode, ExperimentMatrix, PublishedTables,
};
use laf_core::experiment::{aligned_split, heatmap_sidecar, run_desk, write_desk_outputs, DeskConfig};
use laf_core::io::{dataset_dir, load_png, read_dataset, save_gray_png, write_atomic, write_dataset, write_json};
use laf_core::preprocess::{preprocess_face, CanonicalFrame, CropMargins};
use laf_core::synthgen::{build_dataset, Dataset, DatasetItem, DatasetSpec, FamilyId, Split, DEFAULT_IMAGE_SIZE};
use laf_core::train::{train, TrainConfig};
use laf_core::{Error, Result, Sample};

#[derive(Parser)]
#[command(name = "laf", version, about = "Layer-aggregation deepfake detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise synthetic real/fake datasets to disk.
    Generate(GenerateArgs),
    /// Crop and align a generated dataset directory.
    Preprocess(PreprocessArgs),
    /// Train an aggregation model on one manipulation family.
    Train(TrainArgs),
    /// Score checkpoints on test sets and build the AP matrix.
    Eval(EvalArgs),
    /// Rank train sources by inverse coefficient of variation.
    Rank(RankArgs),
    /// Per-layer importance profile of a checkpoint.
    Importance(ImportanceArgs),
    /// Keep only the N most important layers and report AP degradation.
    Trim(TrimArgs),
    /// Score-CAM heatmaps at the most important layers of one image.
    Cam(CamArgs),
    /// Recompute the summary columns of the published tables.
    ReproduceTables(ReproduceArgs),
    /// Full desk-scale study: generate, train, evaluate, rank, trim, CAM.
    Pipeline(PipelineArgs),
}

fn parse_family(s: &str) -> std::result::Result<FamilyId, String> {
    FamilyId::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_criterion(s: &str) -> std::result::Result<RankingCriterion, String> {
    RankingCriterion::parse(s).map_err(|e| e.to_string())
}

#[derive(Clone, Copy, PartialEq)]
enum ModeChoice {
    Both,
    One(CovMode),
}

fn parse_mode(s: &str) -> std::result::Result<ModeChoice, String> {
    match s {
        "both" => Ok(ModeChoice::Both),
        "include_all" => Ok(ModeChoice::One(CovMode::IncludeAll)),
        "exclude_train_column" => Ok(ModeChoice::One(CovMode::ExcludeTrainColumn)),
        _ => Err(format!("unknown mode '{s}' (include_all, exclude_train_column, both)")),
    }
}

impl ModeChoice {
    fn modes(self) -> Vec<CovMode> {
        match self {
            ModeChoice::Both => vec![CovMode::IncludeAll, CovMode::ExcludeTrainColumn],
            ModeChoice::One(m) => vec![m],
        }
    }
}

/// Where evaluation images come from: an aligned dataset root written by
/// `preprocess`, or in-memory generation with these settings.
#[derive(Args, Clone)]
struct DataArgs {
    /// Root of aligned datasets (`<root>/<family>/<split>`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pairs per generated split (ignored with --data).
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Generation seed (ignored with --data; LAF_SEED overrides).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generated image size before alignment (ignored with --data).
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_family)]
    family: FamilyId,
    /// Splits to write; repeatable, default all three.
    #[arg(long = "split", value_parser = parse_split)]
    splits: Vec<Split>,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
    /// Dataset root; files go to `<out>/<family>/<split>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// A dataset directory containing `manifest.json`.
    #[arg(long)]
    input: PathBuf,
    /// Root for the aligned copy (`<out>/<family>/<split>`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    family: FamilyId,
    /// Train run document (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Aligned dataset root; otherwise data is generated from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON training history.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint per matrix row; repeatable.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Test families (matrix columns); repeatable, default all four.
    #[arg(long = "family", value_parser = parse_family)]
    families: Vec<FamilyId>,
    /// Expected model config; a checkpoint built differently is rejected.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Write the matrix here as CSV, plus JSON with a `.json` extension.
    #[arg(long)]
    matrix: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// Matrix JSON written by `eval --matrix`.
    #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
    matrix: Option<PathBuf>,
    /// Rank the published tables; optionally from a fixture file.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    fixture: Option<String>,
    #[arg(long, value_parser = parse_mode, default_value = "both")]
    mode: ModeChoice,
    /// Output directory for `ranking_*.csv` and `ranking.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Family whose split is profiled.
    #[arg(long, value_parser = parse_family)]
    family: FamilyId,
    #[arg(long, value_parser = parse_split, default_value = "val")]
    split: Split,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_criterion, default_value = "mean_abs")]
    criterion: RankingCriterion,
    /// Output directory for `importance.csv` and `importance.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrimArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of layers kept.
    #[arg(long)]
    n: usize,
    /// Family whose validation split ranks the layers.
    #[arg(long, value_parser = parse_family)]
    family: FamilyId,
    /// Test families; repeatable, default all four.
    #[arg(long = "test-family", value_parser = parse_family)]
    test_families: Vec<FamilyId>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_criterion, default_value = "mean_abs")]
    criterion: RankingCriterion,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Aligned input image of the model's input size.
    #[arg(long)]
    image: PathBuf,
    /// Number of top layers to visualise.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Output directory for PNG heatmaps and JSON sidecars.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Fixture file; defaults to the embedded tables.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Output CSV report.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Desk study document (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Document read by `train --config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainRun {
    /// Seeds data generation and weight initialisation.
    seed: u64,
    train_pairs: usize,
    val_pairs: usize,
    image_size: usize,
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            seed: 0,
            train_pairs: 200,
            val_pairs: 50,
            image_size: DEFAULT_IMAGE_SIZE,
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("LAF_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("LAF_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => Ok(serde_json::from_slice(&std::fs::read(p)?)?),
        None => Ok(C::default()),
    }
}

fn default_families(given: &[FamilyId]) -> Vec<FamilyId> {
    if given.is_empty() {
        FamilyId::MANIPULATED.to_vec()
    } else {
        given.to_vec()
    }
}

fn load_aligned_dir(dir: &Path) -> Result<Vec<Sample>> {
    let ds: Dataset<f32> = read_dataset(dir)?;
    Ok(ds.items.into_iter().map(|it| Sample { image: it.image, label: it.label }).collect())
}

impl DataArgs {
    fn with_seed_override(mut self) -> Result<Self> {
        if let Some(s) = seed_override()? {
            self.seed = s;
        }
        Ok(self)
    }

    fn load(&self, family: FamilyId, split: Split) -> Result<Vec<Sample>> {
        match &self.data {
            Some(root) => load_aligned_dir(&root.join(family.as_str()).join(split.as_str())),
            None => Ok(aligned_split(&family.default_family(), self.pairs, self.seed, split, self.image_size)?
                .into_iter()
                .map(|s| s.sample)
                .collect()),
        }
    }
}

fn row_name(ck: &Checkpoint, path: &Path) -> String {
    ck.train
        .as_ref()
        .and_then(|m| m.family.clone())
        .unwrap_or_else(|| path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into()))
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let seed = seed_override()?.unwrap_or(a.seed);
    let splits = if a.splits.is_empty() { Split::ALL.to_vec() } else { a.splits };
    let mut written = Vec::new();
    for split in splits {
        let mut spec = DatasetSpec::new(a.family.default_family(), a.pairs, seed, split);
        spec.image_size = a.image_size;
        let ds = build_dataset::<f32>(&spec)?;
        written.push(write_dataset(&a.out, &ds)?.display().to_string());
    }
    print_json(&serde_json::json!({ "written": written }))
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let ds: Dataset<f32> = read_dataset(&a.input)?;
    let frame = CanonicalFrame::default();
    let items = ds
        .items
        .iter()
        .map(|it| {
            let p = preprocess_face(&it.image, &it.landmarks, CropMargins::default(), &frame)?;
            Ok(DatasetItem { image: p.image, landmarks: p.landmarks, label: it.label, base_seed: it.base_seed })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = write_dataset(&a.out, &Dataset { spec: ds.spec, items })?;
    if dataset_dir(&a.out, &ds.spec) != out {
        return Err(usage("unexpected output layout"));
    }
    print_json(&serde_json::json!({ "written": out.display().to_string(), "out_size": frame.out_size }))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run: TrainRun = read_config(a.config.as_deref())?;
    if let Some(s) = seed_override()? {
        run.seed = s;
        run.train.seed = s;
    }
    if a.family == FamilyId::None {
        return Err(usage("cannot train on the unmanipulated family"));
    }
    let (tr, va) = match &a.data {
        Some(root) => (
            load_aligned_dir(&root.join(a.family.as_str()).join("train"))?,
            load_aligned_dir(&root.join(a.family.as_str()).join("val"))?,
        ),
        None => {
            let fam = a.family.default_family();
            let g = |n, split| -> Result<Vec<Sample>> {
                Ok(aligned_split(&fam, n, run.seed, split, run.image_size)?.into_iter().map(|s| s.sample).collect())
            };
            (g(run.train_pairs, Split::Train)?, g(run.val_pairs, Split::Val)?)
        }
    };
    let init = AggregationModel::<f32>::init(&run.model, run.seed)?;
    let outcome = train(&init, &tr, &va, &run.train)?;
    let mut ckpt = outcome.checkpoint;
    if let Some(meta) = ckpt.train.as_mut() {
        meta.family = Some(a.family.as_str().to_string());
    }
    ckpt.save(&a.out)?;
    if let Some(h) = &a.history {
        write_json(h, &outcome.history)?;
    }
    let meta: Option<&TrainMetadata> = ckpt.train.as_ref();
    print_json(&serde_json::json!({
        "checkpoint": a.out.display().to_string(),
        "best_val_ap": meta.map(|m| m.best_val_ap),
        "best_epoch": meta.map(|m| m.best_epoch),
        "epochs_run": meta.map(|m| m.epochs_run),
    }))
}

fn load_checked(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if let Some(c) = expected {
        ck.require_config(c)?;
    }
    Ok(ck)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let expected: Option<ModelConfig> = match &a.model_config {
        Some(p) => Some(serde_json::from_slice(&std::fs::read(p)?)?),
        None => None,
    };
    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| {
            let ck = load_checked(p, expected.as_ref())?;
            Ok((row_name(&ck, p), ck))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = a.data.with_seed_override()?;
    let fams = default_families(&a.families);
    let tests = fams.iter().map(|&f| data.load(f, Split::Test)).collect::<Result<Vec<_>>>()?;
    let matrix = matrix_from_scores(
        ckpts.iter().map(|c| c.0.clone()).collect(),
        fams.iter().map(|f| f.as_str().to_string()).collect(),
        |i, j| score_dataset(&ckpts[i].1.model, &tests[j]),
    );
    match &a.matrix {
        Some(p) => {
            write_atomic(p, matrix.to_csv().as_bytes())?;
            write_json(&p.with_extension("json"), &matrix)?;
        }
        None => print!("{}", matrix.to_csv()),
    }
    Ok(())
}

fn cmd_rank(a: RankArgs) -> Result<()> {
    let mut report = serde_json::Map::new();
    let mut put = |name: String, rows: Vec<(String, laf_core::eval::CovSummary)>| -> Result<()> {
        write_atomic(&a.out.join(format!("{name}.csv")), ranking_csv(&rows).as_bytes())?;
        report.insert(name, serde_json::to_value(&rows)?);
        Ok(())
    };
    if let Some(p) = &a.matrix {
        let m: ExperimentMatrix = serde_json::from_slice(&std::fs::read(p)?)?;
        m.validate()?;
        for mode in a.mode.modes() {
            put(format!("ranking_{}", mode.as_str()), rank_matrix(&m, mode)?)?;
        }
    } else {
        let tables = match a.fixture.as_deref() {
            None | Some("") => PublishedTables::embedded(),
            Some(path) => PublishedTables::from_json(&std::fs::read_to_string(path)?)?,
        };
        for t in &tables.tables {
            for mode in a.mode.modes() {
                // a table without a single train column has no exclude mode
                if mode == CovMode::ExcludeTrainColumn && t.train_column.is_none() && a.mode == ModeChoice::Both {
                    continue;
                }
                put(format!("ranking_{}_{}", t.id, mode.as_str()), rank_fixture_table(t, mode)?)?;
            }
        }
    }
    write_json(&a.out.join("ranking.json"), &report)
}

fn cmd_importance(a: ImportanceArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = a.data.with_seed_override()?;
    let set = data.load(a.family, a.split)?;
    let profile = layer_importance(&ck.model, &set)?;
    let ranking = rank_layers(&profile, a.criterion);
    write_atomic(&a.out.join("importance.csv"), profile.to_csv().as_bytes())?;
    write_json(
        &a.out.join("importance.json"),
        &serde_json::json!({ "profile": profile, "criterion": a.criterion, "ranking": ranking }),
    )
}

fn cmd_trim(a: TrimArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let data = a.data.with_seed_override()?;
    let profile = layer_importance(model, &data.load(a.family, Split::Val)?)?;
    let plan = TrimPlan::top_n(model, &profile, a.criterion, a.n)?;
    let trimmed = trim(model, &plan)?;
    let fams = default_families(&a.test_families);
    let tests = fams.iter().map(|&f| data.load(f, Split::Test)).collect::<Result<Vec<_>>>()?;
    let rows = vec![row_name(&ck, &a.checkpoint)];
    let cols: Vec<String> = fams.iter().map(|f| f.as_str().to_string()).collect();
    let full = matrix_from_scores(rows.clone(), cols.clone(), |_, j| score_dataset(model, &tests[j]));
    let cut = matrix_from_scores(rows, cols, |_, j| {
        let scores = tests[j].iter().map(|s| trimmed.logit(&s.image).map(f64::from)).collect::<Result<Vec<_>>>()?;
        Ok((scores, tests[j].iter().map(|s| s.label).collect()))
    });
    let report = serde_json::json!({
        "plan": plan,
        "budget": analysis_param_budget(model, &plan)?,
        "ap_degradation": ap_degradation(&full, &cut)?,
        "full": full,
        "trimmed": cut,
    });
    write_json(&a.out, &report)
}

fn cmd_cam(a: CamArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let image = load_png::<f32>(&a.image)?;
    let inf = model.infer(&image)?;
    let contrib = contributions(model, &inf.primitives)?;
    let stem = a.image.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    let mut files = Vec::new();
    for layer in select_cam_layers(model, &image, a.k)? {
        let h = score_cam(model, &image, layer)?;
        let base = a.out.join(format!("{stem}_layer{layer}"));
        save_gray_png(&h.values, h.width, h.height, &base.with_extension("png"))?;
        write_json(&base.with_extension("json"), &heatmap_sidecar(&h, inf.logit as f64, &contrib))?;
        files.push(base.with_extension("png").display().to_string());
    }
    print_json(&serde_json::json!({ "logit": inf.logit, "heatmaps": files }))
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let tables = match &a.fixture {
        Some(p) => PublishedTables::from_json(&std::fs::read_to_string(p)?)?,
        None => PublishedTables::embedded(),
    };
    let report = reproduce_paper_summaries(&tables)?;
    write_atomic(&a.out, report.to_csv().as_bytes())?;
    if let Some(j) = &a.json {
        write_json(j, &report)?;
    }
    let unmatched: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.reproducing_modes().is_empty())
        .map(|r| format!("{}/{}", r.table, r.model))
        .collect();
    print_json(&serde_json::json!({ "rows": report.rows.len(), "unmatched": unmatched }))
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut config: DeskConfig = read_config(a.config.as_deref())?;
    if let Some(s) = seed_override()? {
        config.seed = s;
        config.train.seed = s;
    }
    let mut log = |s: &str| eprintln!("{s}");
    let outcome = run_desk(&config, &mut log)?;
    let files = write_desk_outputs(&outcome, &a.out)?;
    print_json(&serde_json::json!({ "out": a.out.display().to_string(), "files": files }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Trim(a) => cmd_trim(a),
        Command::Cam(a) => cmd_cam(a),
        Command::ReproduceTables(a) => cmd_reproduce(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
