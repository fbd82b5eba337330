use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::io::read_json;
use crate::data::{sample_structures, window_dataset, Series};
use crate::model::ModelConfig;

#[test]
fn forecast_metric_examples() {
    assert_eq!(forecast_metrics(&[1.0, 2.0], &[1.0, 2.0], 1, &[0]).unwrap(), (0.0, 0.0));
    assert_eq!(forecast_metrics(&[1.0, 2.0], &[0.0, 0.0], 1, &[0]).unwrap(), (2.5, 1.5));
    // Two variables; only variable 1 selected.
    let (mse, mae) = forecast_metrics(&[9.0, 1.0, 9.0, 2.0], &[0.0; 4], 2, &[1]).unwrap();
    assert_eq!((mse, mae), (2.5, 1.5));
    assert!(forecast_metrics(&[1.0], &[1.0], 1, &[]).is_err());
    assert!(forecast_metrics(&[1.0], &[1.0], 1, &[1]).is_err());
    assert!(forecast_metrics(&[1.0, 2.0], &[1.0], 1, &[0]).is_err());
}

proptest! {
    #[test]
    fn mae_is_at_most_root_mse(
        p in prop::collection::vec(-10.0f64..10.0, 1..40),
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|_| r.random_range(-10.0..10.0)).collect();
        let (mse, mae) = forecast_metrics(&p, &t, 1, &[0]).unwrap();
        prop_assert!(mae <= mse.sqrt() + 1e-12);
    }

    #[test]
    fn auprc_is_invariant_to_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 8),
        truth in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(truth.iter().any(|&t| t));
        let a = auprc(&scores, &truth).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 7.0).collect();
        prop_assert_eq!(a, auprc(&squashed, &truth).unwrap());
        prop_assert_eq!(a, auprc(&shifted, &truth).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn standardized_metrics_scale_with_std() {
    let std = [2.0, 0.5];
    let raw_p = [1.0, 3.0, -2.0, 0.5, 4.0, 1.0];
    let raw_t = [0.0, 2.5, 1.0, 1.0, 3.0, 0.0];
    let z = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x / std[i % 2]).collect() };
    for m in 0..2 {
        let (rm, ra) = forecast_metrics(&raw_p, &raw_t, 2, &[m]).unwrap();
        let (zm, za) = forecast_metrics(&z(&raw_p), &z(&raw_t), 2, &[m]).unwrap();
        assert!((zm - rm / std[m].powi(2)).abs() < 1e-12);
        assert!((za - ra / std[m]).abs() < 1e-12);
    }
}

#[test]
fn auprc_examples() {
    let a = auprc(&[0.9, 0.1, 0.8, 0.05], &[true, true, false, false]).unwrap();
    assert!((a - 5.0 / 6.0).abs() < 1e-9, "{a}");
    let r = auprc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
    assert!((r - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-9, "{r}");
    assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    assert!(auprc(&[0.5, 0.5], &[false, false]).is_err());
    assert!(auprc(&[f64::NAN, 0.5], &[true, false]).is_err());
    // Ties keep index order: the earlier entry ranks first.
    assert_eq!(auprc(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    assert_eq!(auprc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
}

fn setup() -> (ModelParams, Dataset, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = sample_structures(3, 2, 0.4, 1.0, &mut rng).unwrap();
    let gt = GroundTruth::from_structures(&s).unwrap();
    use rand::Rng;
    let values: Vec<f64> = (0..300 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ds = window_dataset(&Series::new(3, values).unwrap(), 10, 4, 1, 1).unwrap();
    let p = ModelParams::init(ModelConfig::new(ModelKind::Gca, 3, 2, vec![1]), &mut rng).unwrap();
    (p, ds, gt)
}

#[test]
fn evaluation_is_deterministic_and_thread_independent() {
    let (p, ds, gt) = setup();
    let a = evaluate(&p, &ds, Some(&gt), 0, 1).unwrap();
    let b = evaluate(&p, &ds, Some(&gt), 0, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_windows, ds.len());
    assert!(a.mse >= 0.0 && a.mae >= 0.0);
    let au = a.auprc.unwrap();
    assert!((0.0..=1.0).contains(&au));
    let lines = a.lines();
    assert!(lines.iter().any(|l| l.starts_with("auprc=")));

    let none = evaluate(&p, &ds, None, 0, 2).unwrap();
    assert!(none.auprc.is_none());
    assert!(!none.lines().iter().any(|l| l.starts_with("auprc")));
}

#[test]
fn evaluation_rejects_mismatched_data() {
    let (p, ds, _) = setup();
    let mut other = ds.clone();
    other.vars = 4;
    assert!(evaluate(&p, &other, None, 0, 1).is_err());
    let mut wrong_domain = ds.clone();
    wrong_domain.domain_id = 9;
    assert!(evaluate(&p, &wrong_domain, None, 0, 1).is_err());
}

#[test]
fn export_thresholds_and_round_trips() {
    let e = StructureExport::from_scores(1, 1, &[0.6, 0.4], 0.5).unwrap();
    assert_eq!(e.adjacency, vec![vec![vec![1]], vec![vec![0]]]);
    assert_eq!(e.summary, vec![vec![0.5]]);

    let (p, ds, gt) = setup();
    let dir = tempfile::tempdir().unwrap();
    let (export, files) = export_structures(&p, &ds, dir.path(), 0.5).unwrap();
    assert_eq!(files.len(), 2 + 2);
    let back: StructureExport = read_json(&dir.path().join("structures.json")).unwrap();
    assert_eq!(back, export);

    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));

    // Self-consistency with the evaluation report.
    let report = evaluate(&p, &ds, Some(&gt), 0, 2).unwrap();
    let (lag, summary) = structure_auprc(&back.flat_probabilities(), 3, &gt).unwrap();
    assert_eq!(report.auprc, Some(lag));
    assert_eq!(report.auprc_summary, Some(summary));
    assert!(export_structures(&p, &ds, dir.path(), 1.5).is_err());
}

#[test]
fn structure_auprc_pads_missing_lags() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample_structures(2, 1, 0.5, 1.0, &mut rng).unwrap();
    let gt = GroundTruth::from_structures(&s).unwrap();
    let truth: Vec<f64> = gt.flat_adjacency().iter().map(|&b| f64::from(u8::from(b))).collect();
    // Perfect lag-1 scores and an all-zero extra lag.
    let mut scores = truth.clone();
    scores.extend([0.0; 4]);
    if truth.iter().any(|&t| t > 0.0) {
        let (lag, summary) = structure_auprc(&scores, 2, &gt).unwrap();
        assert_eq!(lag, 1.0);
        assert_eq!(summary, 1.0);
    }
}
