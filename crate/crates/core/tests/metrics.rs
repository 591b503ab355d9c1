mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng;
use sleepyco::eval::{
    compute_metrics, confusion, parse_confusion_csv, parse_metrics_csv, pooled, render_report, ConfusionMatrix, FoldResult,
};

#[test]
fn published_matrices_reproduce_their_scores() {
    for p in common::published() {
        let r = compute_metrics(&ConfusionMatrix { counts: p.counts }).unwrap();
        assert!((r.acc * 100.0 - p.acc_pct).abs() <= 0.1, "{} acc {}", p.name, r.acc);
        assert!((r.kappa - p.kappa).abs() <= 0.001, "{} kappa {}", p.name, r.kappa);
        for c in 0..5 {
            assert!((r.per_class_f1[c] * 100.0 - p.f1_pct[c]).abs() <= 0.1, "{} f1[{c}] {}", p.name, r.per_class_f1[c]);
        }
    }
}

#[test]
fn counts_match_a_hashmap_tally() {
    let mut rng = common::seeded(11);
    let labels: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..5)).collect();
    let preds: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..5)).collect();
    let mut tally: HashMap<(usize, usize), u64> = HashMap::new();
    for (&a, &p) in labels.iter().zip(&preds) {
        *tally.entry((a, p)).or_default() += 1;
    }
    let cm = confusion(&preds, &labels).unwrap();
    for a in 0..5 {
        for p in 0..5 {
            assert_eq!(cm.counts[a][p], tally.get(&(a, p)).copied().unwrap_or(0));
        }
    }
    assert_eq!(cm.total(), 1000);
}

fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform5(prop::array::uniform5(0u64..40))
        .prop_filter("non-empty", |c| c.iter().flatten().sum::<u64>() > 0)
        .prop_map(|counts| ConfusionMatrix { counts })
}

proptest! {
    #[test]
    fn accuracy_is_trace_over_total_and_matching_fraction(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = compute_metrics(&confusion(&preds, &labels).unwrap()).unwrap();
        let matching = pairs.iter().filter(|(a, p)| a == p).count() as f64 / pairs.len() as f64;
        prop_assert!((r.acc - matching).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_one_exactly_for_diagonal(cm in matrix()) {
        let r = compute_metrics(&cm).unwrap();
        let diagonal = (0..5).all(|i| (0..5).all(|j| i == j || cm.counts[i][j] == 0));
        prop_assert_eq!(diagonal, (r.kappa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_has_zero_kappa(labels in prop::collection::vec(0usize..5, 1..100), c in 0usize..5) {
        // all labels equal to `c` is perfect agreement, not chance
        prop_assume!(labels.iter().any(|&l| l != c));
        let preds = vec![c; labels.len()];
        let r = compute_metrics(&confusion(&preds, &labels).unwrap()).unwrap();
        prop_assert!(r.kappa.abs() < 1e-12);
    }

    #[test]
    fn macro_f1_ignores_class_order(cm in matrix(), perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle()) {
        let mut permuted = ConfusionMatrix::default();
        for i in 0..5 {
            for j in 0..5 {
                permuted.counts[perm[i]][perm[j]] = cm.counts[i][j];
            }
        }
        let (a, b) = (compute_metrics(&cm).unwrap(), compute_metrics(&permuted).unwrap());
        prop_assert!((a.mf1 - b.mf1).abs() < 1e-12);
        prop_assert!((a.kappa - b.kappa).abs() < 1e-12);
    }

    #[test]
    fn f1_is_harmonic_mean_of_precision_and_recall(cm in matrix()) {
        let r = compute_metrics(&cm).unwrap();
        for c in 0..5 {
            let (p, q) = (r.per_class_precision[c], r.per_class_recall[c]);
            let want = if p + q == 0.0 { 0.0 } else { 2.0 * p * q / (p + q) };
            prop_assert!((r.per_class_f1[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_csv_round_trips(cm in matrix()) {
        prop_assert_eq!(parse_confusion_csv(&sleepyco::eval::confusion_csv(&cm)).unwrap(), cm);
    }
}

fn folds() -> Vec<FoldResult> {
    let mut rng = common::seeded(3);
    (0..3)
        .map(|f| {
            // unequal sizes and skill, so pooling differs from averaging
            let labels: Vec<usize> = (0..40 * (f + 1)).map(|_| rng.gen_range(0..5)).collect();
            let skill = 0.5 + 0.2 * f as f64;
            let preds: Vec<usize> = labels.iter().map(|&l| if rng.gen_bool(skill) { l } else { rng.gen_range(0..5) }).collect();
            FoldResult {
                name: format!("fold{f}"),
                confusion: confusion(&preds, &labels).unwrap(),
                hypnogram: Some((format!("S{f:02}"), labels[..20].to_vec(), preds[..20].to_vec())),
            }
        })
        .collect()
}

#[test]
fn report_pools_counts_before_scoring() {
    let folds = folds();
    let dir = tempfile::tempdir().unwrap();
    let agg = render_report(&folds, dir.path()).unwrap();
    let cms: Vec<ConfusionMatrix> = folds.iter().map(|f| f.confusion).collect();
    assert_eq!(agg, compute_metrics(&pooled(&cms)).unwrap());
    let mean_acc = folds.iter().map(|f| compute_metrics(&f.confusion).unwrap().acc).sum::<f64>() / 3.0;
    assert_ne!(agg.acc, mean_acc);

    let rows = parse_metrics_csv(&std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].0, "aggregate");
    assert_eq!((rows[3].1, rows[3].2, rows[3].3), (agg.acc, agg.mf1, agg.kappa));
    assert_eq!(rows[3].4, agg.per_class_f1);
    let pooled_csv = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    assert_eq!(parse_confusion_csv(&pooled_csv).unwrap(), pooled(&cms));
    for name in ["metrics.json", "confusion_fold0.svg", "hypnogram_fold2.svg", "confusion_aggregate.svg"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
}

#[test]
fn report_files_are_byte_identical_across_runs() {
    let folds = folds();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    render_report(&folds, a.path()).unwrap();
    render_report(&folds, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 9);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}
