mod common;

use approx::assert_abs_diff_eq;
use laf_core::analysis::{
    ap_degradation, contributions, rank_layers, trim, ImportanceProfile, LayerImportance, RankingCriterion,
    TrimPlan,
};
use laf_core::eval::{average_precision, cov_summary, CovMode, ExperimentMatrix, Provenance};
use laf_core::preprocess::CanonicalFrame;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn labels_with_both() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..100)
        .prop_flat_map(|n| (prop::collection::vec(0u8..=4, n), prop::collection::vec(0u8..=1, n)))
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        .prop_map(|(s, l)| (s.into_iter().map(f64::from).collect(), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ap_matches_all_threshold_oracle((scores, labels) in labels_with_both()) {
        let ap = average_precision(&scores, &labels).unwrap().value;
        prop_assert!((ap - ap_all_thresholds(&scores, &labels)).abs() <= 1e-9);
    }

    #[test]
    fn ap_invariant_under_monotone_transforms((scores, labels) in labels_with_both(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = average_precision(&scores, &labels).unwrap().value;
        for f in [
            Box::new(move |x: f64| a * x + b) as Box<dyn Fn(f64) -> f64>,
            Box::new(|x: f64| (0.7 * x).exp()),
            Box::new(|x: f64| (x - 2.0).powi(3)),
            Box::new(|x: f64| (x - 1.5).atan()),
        ] {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(average_precision(&t, &labels).unwrap().value.to_bits(), base.to_bits());
        }
    }

    #[test]
    fn cov_summary_matches_two_pass(values in prop::collection::vec(0.0f64..100.0, 3..20), drop in 0usize..20) {
        let (mean, std) = naive_mean_std(&values);
        prop_assume!(std > 1e-6);
        let s = cov_summary(&values, CovMode::IncludeAll, None).unwrap();
        assert_abs_diff_eq!(s.mean, mean, epsilon = 1e-9);
        assert_abs_diff_eq!(s.std, std, epsilon = 1e-9);
        assert_abs_diff_eq!(s.inv_cov, mean / std, epsilon = 1e-9 * (1.0 + mean / std));

        let t = drop % values.len();
        let rest: Vec<f64> = values.iter().enumerate().filter(|(i, _)| *i != t).map(|(_, v)| *v).collect();
        let (m2, s2) = naive_mean_std(&rest);
        prop_assume!(s2 > 1e-6);
        let e = cov_summary(&values, CovMode::ExcludeTrainColumn, Some(t)).unwrap();
        assert_abs_diff_eq!(e.mean, m2, epsilon = 1e-9);
        assert_abs_diff_eq!(e.std, s2, epsilon = 1e-9);
        prop_assert_eq!(e.n_values, values.len() - 1);
    }

    #[test]
    fn decomposition_sums_to_logit(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = random_config(&mut rng);
        let model = random_model(&config, seed);
        let image = random_image(&mut rng, config.backbone.input_size);
        let inf = model.infer(&image).unwrap();
        let c = contributions(&model, &inf.primitives).unwrap();
        let total = c.iter().sum::<f64>() + model.head.b;
        prop_assert!((total - concat_logit(&model, &image)).abs() <= 1e-9);
        prop_assert!((total - inf.logit).abs() <= 1e-9);
    }

    #[test]
    fn left_eye_lands_on_target(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lm = random_landmarks(&mut rng, 400.0);
        let frame = CanonicalFrame::default();
        let warp = laf_core::preprocess::similarity_for(&lm, &frame).unwrap();
        let p = laf_core::preprocess::apply_affine(&warp, lm.left_eye);
        prop_assert!((p[0] - 96.0).hypot(p[1] - 112.0) <= 0.5);
        let r = laf_core::preprocess::apply_affine(&warp, lm.right_eye);
        prop_assert!((r[0] - 176.0).hypot(r[1] - 112.0) <= 0.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn trim_equals_zero_masked_head(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = random_config(&mut rng);
        let model = random_model(&config, seed);
        let image = random_image(&mut rng, config.backbone.input_size);
        let l = model.num_layers();
        let mut order: Vec<usize> = (1..=l).collect();
        order.shuffle(&mut rng);
        for n in 1..=l {
            let plan = TrimPlan::new(&model, order[..n].to_vec(), RankingCriterion::MeanAbs).unwrap();
            let t = trim(&model, &plan).unwrap();
            let want = zero_masked(&model, &order[..n]).logit(&image).unwrap();
            prop_assert!((t.logit(&image).unwrap() - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn ranking_ignores_entry_order(mut vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..10), seed in any::<u64>()) {
        let entries: Vec<LayerImportance> = vals
            .drain(..)
            .enumerate()
            .map(|(i, (r, f))| LayerImportance {
                layer_index: i + 1,
                mean_real: r,
                mean_fake: f,
                mean_abs: (r.abs() + f.abs()) / 2.0,
                head_norm: 1.0,
            })
            .collect();
        let profile = ImportanceProfile { per_layer: entries.clone(), n_real: 1, n_fake: 1 };
        let mut shuffled = entries;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let other = ImportanceProfile { per_layer: shuffled, n_real: 1, n_fake: 1 };
        for c in [RankingCriterion::MeanAbs, RankingCriterion::FakeRealGap, RankingCriterion::HeadNorm] {
            prop_assert_eq!(rank_layers(&profile, c), rank_layers(&other, c));
        }
    }
}

/// Every label vector of length <= 8 against every score vector over three
/// levels, so ties of every shape are covered.
#[test]
fn ap_oracle_exhaustive_up_to_eight() {
    let mut cases = 0usize;
    for n in 2..=8usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            for code in 0..3usize.pow(n as u32) {
                let scores: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
                let got = average_precision(&scores, &labels).unwrap().value;
                assert!((got - ap_all_thresholds(&scores, &labels)).abs() <= 1e-9, "{scores:?} {labels:?}");
                cases += 1;
            }
        }
    }
    assert!(cases > 1_500_000);
}

/// Reversed scores with flipped labels rank the former negatives; on
/// balanced data a perfect ranking stays perfect and a fully inverted one
/// maps onto the oracle's value for the mirrored problem.
#[test]
fn reversal_with_flipped_labels_matches_oracle() {
    let n = 8;
    let mut perm: Vec<usize> = (0..n).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
    let mut count = 0;
    loop {
        let scores: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
        let rev: Vec<f64> = scores.iter().map(|s| -s).collect();
        let ap = average_precision(&rev, &flipped).unwrap().value;
        assert!((ap - ap_all_thresholds(&rev, &flipped)).abs() <= 1e-12);
        let sorted = labels.iter().zip(&scores).all(|(&l, &s)| (l == 1) == (s >= 4.0));
        if sorted {
            assert_eq!(average_precision(&scores, &labels).unwrap().value, 1.0);
            assert_eq!(ap, 1.0);
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    assert_eq!(count, 40320);
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).expect("pivot has a successor");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[test]
fn degradation_of_identical_matrices_is_exactly_zero() {
    let m = ExperimentMatrix::from_values(
        vec!["a".into(), "b".into()],
        vec!["a".into(), "b".into()],
        vec![vec![99.1, 71.3], vec![64.25, 100.0]],
        Provenance::Measured,
    )
    .unwrap();
    assert_eq!(ap_degradation(&m, &m).unwrap(), 0.0);
}
