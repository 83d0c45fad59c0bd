//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Tolerances are fixed constants below.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use laf_core::analysis::{ap_degradation, contributions, trim, RankingCriterion, TrimPlan};
use laf_core::eval::{average_precision, reproduce_paper_summaries, CovMode, PublishedTables};
use laf_core::experiment::{run_desk, write_desk_outputs, DeskConfig, DeskReport};
use laf_core::preprocess::CanonicalFrame;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const TABLE_TOL: f64 = 0.01;
const TABLE_SECONDS: f64 = 1.0;
const DECOMP_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_SECONDS: f64 = 60.0;
const TRIM_TOL: f64 = 1e-9;
const AP_TOL: f64 = 1e-9;
const DIAG_MIN: f64 = 95.0;
const DESK_SECONDS: f64 = 15.0 * 60.0;
const CAM_FAKES: usize = 50;
const CAM_MIN_FRACTION: f64 = 0.8;
const ALIGN_TOL_PX: f64 = 0.5;
const ALIGN_CASES: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn criterion_tables() -> Outcome {
    let t0 = Instant::now();
    let rep = reproduce_paper_summaries(&PublishedTables::embedded()).expect("fixture report");
    let secs = t0.elapsed().as_secs_f64();
    let mut failed = Vec::new();
    let mut n = 0;
    for r in &rep.rows {
        let mode = if r.table == "table1" { CovMode::ExcludeTrainColumn } else { CovMode::IncludeAll };
        let c = r.check(mode).expect("mode computed");
        let ok = [(c.summary.mean, r.published.mean), (c.summary.std, r.published.std), (c.summary.inv_cov, r.published.inv_cov)]
            .iter()
            .all(|(a, b)| (a - b).abs() <= TABLE_TOL + 1e-9);
        n += 1;
        if !ok {
            failed.push(format!(
                "{}/{} got ({:.2}, {:.2}, {:.2}) published ({:.2}, {:.2}, {:.2}); reproduces under {:?}",
                r.table,
                r.model,
                c.summary.mean,
                c.summary.std,
                c.summary.inv_cov,
                r.published.mean,
                r.published.std,
                r.published.inv_cov,
                r.reproducing_modes().iter().map(|m| m.as_str()).collect::<Vec<_>>()
            ));
        }
    }
    let pass = failed.is_empty() && secs < TABLE_SECONDS;
    let detail = if failed.is_empty() {
        format!("{n} rows within ±{TABLE_TOL} in {secs:.3}s")
    } else {
        format!("{}/{n} rows off in the prescribed mode in {secs:.3}s: {}", failed.len(), failed.join("; "))
    };
    Outcome { pass, detail }
}

fn criterion_property_suites() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = random_config(&mut rng);
        let model = random_model(&config, seed);
        let image = random_image(&mut rng, config.backbone.input_size);
        let inf = model.infer(&image).unwrap();
        let c = contributions(&model, &inf.primitives).unwrap();
        worst = worst.max((c.iter().sum::<f64>() + model.head.b - concat_logit(&model, &image)).abs());
    }
    pass &= worst <= DECOMP_TOL;
    notes.push(format!("decomposition max err {worst:.1e} over 1000"));

    let t0 = Instant::now();
    let mut gworst = 0.0f64;
    for seed in 0..4u64 {
        let model = random_model(&mini_config(), seed);
        let image = random_image(&mut ChaCha8Rng::seed_from_u64(100 + seed), 8);
        gworst = gworst.max(finite_difference_check(&model, &image, (seed % 2) as u8).0);
    }
    let gsecs = t0.elapsed().as_secs_f64();
    pass &= gworst < GRAD_REL_TOL && gsecs < GRAD_SECONDS;
    notes.push(format!("gradient max rel err {gworst:.1e} in {gsecs:.2}s"));

    let mut tworst = 0.0f64;
    let mut deg_zero = true;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let config = random_config(&mut rng);
        let model = random_model(&config, seed);
        let image = random_image(&mut rng, config.backbone.input_size);
        let mut order: Vec<usize> = (1..=model.num_layers()).collect();
        order.shuffle(&mut rng);
        for n in 1..=order.len() {
            let plan = TrimPlan::new(&model, order[..n].to_vec(), RankingCriterion::MeanAbs).unwrap();
            let got = trim(&model, &plan).unwrap().logit(&image).unwrap();
            tworst = tworst.max((got - zero_masked(&model, &order[..n]).logit(&image).unwrap()).abs());
        }
    }
    let m = laf_core::eval::ExperimentMatrix::from_values(
        vec!["a".into()],
        vec!["a".into(), "b".into()],
        vec![vec![97.5, 63.25]],
        laf_core::eval::Provenance::Measured,
    )
    .unwrap();
    deg_zero &= ap_degradation(&m, &m).unwrap() == 0.0;
    pass &= tworst <= TRIM_TOL && deg_zero;
    notes.push(format!("trim max err {tworst:.1e}, AP_deg(full, full) == 0: {deg_zero}"));

    let mut aworst = 0.0f64;
    let mut cases = 0usize;
    for n in 1..=8usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            for code in 0..3usize.pow(n as u32) {
                let scores: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
                aworst = aworst.max((average_precision(&scores, &labels).unwrap().value - ap_all_thresholds(&scores, &labels)).abs());
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let mut labels: Vec<u8> = (0..100).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = if rng.gen_bool(0.5) {
            (0..100).map(|_| rng.gen_range(0..10) as f64).collect()
        } else {
            (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        aworst = aworst.max((average_precision(&scores, &labels).unwrap().value - ap_all_thresholds(&scores, &labels)).abs());
        cases += 1;
    }
    pass &= aworst <= AP_TOL;
    notes.push(format!("AP oracle max err {aworst:.1e} over {cases} cases"));
    Outcome { pass, detail: notes.join(", ") }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_desk(config: &DeskConfig) -> (Outcome, Option<DeskReport>) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut first: Option<DeskReport> = None;
    let mut secs = 0.0;
    for dir in &dirs {
        let t0 = Instant::now();
        let mut log = |s: &str| eprintln!("  [{:6.1}s] {s}", t0.elapsed().as_secs_f64());
        let outcome = match run_desk(config, &mut log) {
            Ok(o) => o,
            Err(e) => return (Outcome { pass: false, detail: format!("desk run failed: {e}") }, None),
        };
        if first.is_none() {
            secs = t0.elapsed().as_secs_f64();
        }
        write_desk_outputs(&outcome, dir.path()).unwrap();
        first.get_or_insert(outcome.report);
    }
    let report = first.expect("ran");
    let a = read_tree(dirs[0].path());
    let identical = a == read_tree(dirs[1].path());

    let m = &report.matrix;
    let diag: Vec<(String, f64)> =
        (0..m.rows.len()).map(|i| (m.rows[i].clone(), m.diagonal_col(i).and_then(|j| m.value(i, j)).unwrap_or(f64::NAN))).collect();
    let diag_ok = m.shape() == (4, 4) && diag.iter().all(|(_, v)| *v >= DIAG_MIN);
    let mut required = vec![
        "matrix.csv",
        "report.json",
        "ranking_include_all.csv",
        "ranking_exclude_train_column.csv",
        "trim_curve.csv",
        "importance_local_blend.csv",
    ];
    required.retain(|f| !a.contains_key(*f));
    let mut ns: Vec<usize> = report.trim_curve.iter().map(|p| p.n).collect();
    ns.sort();
    let curve_ok = ns == vec![1, 3, config.model.backbone.num_layers()];
    let rank_ok = report.ranking_include_all.len() == 4 && report.ranking_exclude_train.len() == 4;
    let pass = identical && diag_ok && required.is_empty() && curve_ok && rank_ok && secs < DESK_SECONDS;
    let detail = format!(
        "diagonal APs {}; missing artifacts {:?}; trim sizes {:?}; rankings {}/{}; byte-identical rerun {identical}; first run {secs:.0}s",
        diag.iter().map(|(r, v)| format!("{r}={v:.2}")).collect::<Vec<_>>().join(" "),
        required,
        ns,
        report.ranking_include_all.len(),
        report.ranking_exclude_train.len(),
    );
    (Outcome { pass, detail }, Some(report))
}

/// Closed-form analysis parameter count of one desk projector: every tap is
/// pooled to 4x4, then FC(d, 128), FC(128, 32), FC(32, 10).
fn desk_projector_params(channels: usize) -> usize {
    let d = channels * 16;
    d * 128 + 128 + 128 * 32 + 32 + 32 * 10 + 10
}

fn criterion_trim(report: &DeskReport) -> Outcome {
    let channels = [16, 16, 32, 32, 64, 64, 128, 128];
    let full = channels.iter().map(|&c| desk_projector_params(c)).sum::<usize>() + 10 * channels.len() + 1;
    let at = |n: usize| report.trim_curve.iter().find(|p| p.n == n);
    let (Some(p1), Some(p3)) = (at(1), at(3)) else {
        return Outcome { pass: false, detail: "trim curve lacks N=1 or N=3".into() };
    };
    let mono = p3.ap_degradation <= p1.ap_degradation;
    let mut exact = true;
    for (b, sel) in p1.budgets.iter().zip(&p1.selected_layers) {
        let trimmed = desk_projector_params(channels[sel[0] - 1]) + 10 + 1;
        exact &= b.full == full && b.trimmed == trimmed && b.fraction == trimmed as f64 / full as f64;
    }
    Outcome {
        pass: mono && exact,
        detail: format!(
            "AP_deg N=1 {:.4}, N=3 {:.4}, N=all {:.4}; N=1 fractions {:?} exact: {exact}",
            p1.ap_degradation,
            p3.ap_degradation,
            report.trim_curve.last().map_or(f64::NAN, |p| p.ap_degradation),
            p1.budgets.iter().map(|b| format!("{:.5}", b.fraction)).collect::<Vec<_>>()
        ),
    }
}

fn criterion_cam(report: &DeskReport) -> Outcome {
    match &report.cam {
        Some(c) => Outcome {
            pass: c.n_images == CAM_FAKES && c.win_fraction >= CAM_MIN_FRACTION,
            detail: format!("inside > outside on {}/{} {} fakes ({:.0}%)", c.n_inside_wins, c.n_images, c.family, 100.0 * c.win_fraction),
        },
        None => Outcome { pass: false, detail: "no CAM summary".into() },
    }
}

fn criterion_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let frame = CanonicalFrame { out_size: 64, left_eye_target: [24.0, 28.0], eye_axis: [1.0, 0.0], eye_distance: 20.0 };
    let (mut wmax, mut cmax) = (0.0f64, 0.0f64);
    for _ in 0..ALIGN_CASES {
        let lm = random_landmarks(&mut rng, 160.0);
        let (w, c) = alignment_errors(&lm, &frame, 160);
        wmax = wmax.max(w);
        cmax = cmax.max(c);
    }
    Outcome {
        pass: wmax <= ALIGN_TOL_PX && cmax <= ALIGN_TOL_PX,
        detail: format!("{ALIGN_CASES} configs: max warp error {wmax:.2e} px, max blob-centroid error {cmax:.3} px"),
    }
}

fn main() {
    // `cargo test` passes harness flags; a filter that does not name this
    // target means it was not selected.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let mut all = true;
    let mut run = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        all &= o.pass;
    };
    run(1, "published table summaries", criterion_tables());
    run(2, "property suites", criterion_property_suites());
    let config = DeskConfig { cam_fakes: CAM_FAKES, ..DeskConfig::default() };
    let (desk, report_opt) = criterion_desk(&config);
    run(3, "end-to-end desk experiment", desk);
    match &report_opt {
        Some(r) => {
            run(4, "trimming behaviour", criterion_trim(r));
            run(5, "CAM localisation", criterion_cam(r));
        }
        None => {
            run(4, "trimming behaviour", Outcome { pass: false, detail: "desk run unavailable".into() });
            run(5, "CAM localisation", Outcome { pass: false, detail: "desk run unavailable".into() });
        }
    }
    run(6, "alignment contract", criterion_alignment());
    if !all {
        std::process::exit(1);
    }
}
