mod common;

use common::oracles::{auprc_oracle, auroc_oracle, ece_oracle, metric_oracle_gaps};
use qutelab::metrics::{auprc, auroc, ece, PredictionBatch};

#[test]
fn library_metrics_match_brute_force_on_random_batches() {
    let g = metric_oracle_gaps(200, 11);
    assert_eq!(g.batches, 200);
    assert!(g.worst() <= 1e-9, "{g:?}");
}

#[test]
fn oracles_agree_on_hand_cases() {
    // Two samples, one right at 0.9 and one wrong at 0.6, ten bins.
    let rows = vec![vec![0.9, 0.1], vec![0.6, 0.4]];
    let labels = vec![0, 1];
    let expected = 0.5 * (1.0 - 0.9) + 0.5 * 0.6;
    assert!((ece_oracle(&rows, &labels, 10) - expected).abs() < 1e-15);
    let b = PredictionBatch::new(rows, labels).unwrap();
    assert!((ece(&b, 10).unwrap().0 - expected).abs() < 1e-15);

    let scores = [0.9, 0.8, 0.8, 0.1];
    let pos = [true, false, true, false];
    assert_eq!(auroc_oracle(&scores, &pos), 0.875);
    assert_eq!(auroc(&scores, &pos).unwrap(), 0.875);

    let pts = [(1.0, 0.5), (0.5, 1.0), (0.5, 0.8)];
    assert_eq!(auprc_oracle(&pts), 0.5 + 0.375);
    assert_eq!(auprc(&pts).unwrap(), 0.875);
}
