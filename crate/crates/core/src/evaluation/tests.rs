use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::files::parse_scores;
use super::*;

/// Sample 0 is a seen composition (column 0), sample 1 unseen (column 1);
/// both correctly top-scored.
fn perfect() -> ScoreMatrix {
    ScoreMatrix::new(vec![0.9, 0.1, 0.2, 0.8], vec![0, 1], vec![true, false]).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, na: usize) -> ScoreMatrix {
    let mut seen: Vec<bool> = (0..na).map(|k| k % 2 == 0).collect();
    seen[0] = true;
    seen[na - 1] = false;
    let mut truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..na)).collect();
    truth[0] = 0;
    truth[1] = na - 1;
    let scores = (0..n * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    ScoreMatrix::new(scores, truth, seen).unwrap()
}

#[test]
fn harmonic_mean_examples() {
    assert!((harmonic_mean(0.30, 0.30) - 0.30).abs() < 1e-15);
    assert!((harmonic_mean(0.20, 0.60) - 0.30).abs() < 1e-15);
    assert_eq!(harmonic_mean(0.7, 0.0), 0.0);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn perfect_classifier() {
    let m = perfect();
    let curve = bias_sweep(&m).unwrap();
    assert!(curve.points.iter().any(|p| p.seen == 1.0 && p.unseen == 1.0));
    let last = curve.points.last().unwrap();
    assert_eq!((last.seen, last.unseen), (1.0, 0.0));
    let first = curve.points[0];
    assert_eq!((first.seen, first.unseen), (0.0, 1.0));
    let r = metrics(&curve, &m, None).unwrap();
    assert_eq!(r.auc, 1.0);
    assert_eq!(r.best_hm, 1.0);
    assert_eq!(r.verb_acc, None);
}

#[test]
fn needs_both_kinds_of_sample() {
    let r = ScoreMatrix::new(vec![0.9, 0.1], vec![0], vec![true, false]);
    assert!(matches!(r, Err(Error::InvalidInput(_))));
}

#[test]
fn ties_go_to_lowest_column() {
    let m = ScoreMatrix::new(vec![0.5, 0.5, 0.5, 0.5], vec![0, 1], vec![false, true]).unwrap();
    assert_eq!(m.predict(0, 0.0), 0);
    assert_eq!(m.predict(0, 1e-9), 1);
}

#[test]
fn curve_is_monotone_with_increasing_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let m = random_matrix(&mut rng, 40, 12);
        let c = bias_sweep(&m).unwrap();
        for w in c.points.windows(2) {
            assert!(w[0].bias < w[1].bias);
            assert!(w[0].seen <= w[1].seen);
            assert!(w[0].unseen >= w[1].unseen);
        }
        let r = metrics(&c, &m, None).unwrap();
        assert!(r.best_hm <= harmonic_mean(r.best_seen, r.best_unseen) + 1e-15);
        assert!((0.0..=1.0).contains(&r.auc));
    }
}

#[test]
fn constant_shift_changes_nothing_but_biases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_matrix(&mut rng, 30, 8);
    // A power of two keeps every shifted score and difference exact.
    let shifted = ScoreMatrix::new(
        m.scores().iter().map(|s| s + 4.0).collect(),
        m.ground_truth().to_vec(),
        m.seen().to_vec(),
    )
    .unwrap();
    let (a, b) = (bias_sweep(&m).unwrap(), bias_sweep(&shifted).unwrap());
    let acc = |c: &SweepCurve| c.points.iter().map(|p| (p.seen, p.unseen)).collect::<Vec<_>>();
    assert_eq!(acc(&a), acc(&b));
    let (ra, rb) = (metrics(&a, &m, None).unwrap(), metrics(&b, &shifted, None).unwrap());
    assert_eq!((ra.best_hm, ra.auc, ra.best_seen), (rb.best_hm, rb.auc, rb.best_seen));
}

#[test]
fn component_accuracies() {
    let m = perfect();
    let c = ComponentScores {
        verb: vec![vec![0.9, 0.1], vec![0.9, 0.2]],
        object: vec![vec![0.1, 0.9], vec![0.2, 0.1]],
        verb_truth: vec![0, 1],
        object_truth: vec![1, 0],
        columns: vec![(0, 1), (1, 0)],
    };
    let r = metrics(&bias_sweep(&m).unwrap(), &m, Some(&c)).unwrap();
    assert_eq!(r.verb_acc, Some(0.5));
    assert_eq!(r.object_acc, Some(1.0));
    assert_eq!(r.verb_acc_composed, Some(1.0));
    assert_eq!(r.object_acc_composed, Some(1.0));
}

#[test]
fn export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = random_matrix(&mut rng, 25, 9);
    let curve = bias_sweep(&m).unwrap();
    let report = metrics(&curve, &m, None).unwrap();
    let path = dir.path().join("curve.csv");
    let sidecar = export_curve(&curve, &report, &path).unwrap();
    assert_eq!(read_curve(&path).unwrap(), curve);
    assert_eq!(read_report(&sidecar).unwrap(), report);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), curve.len() + 1);
}

#[test]
fn score_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.bin");
    let m = ScoreMatrix::new(vec![0.5, -0.25, 1.0, 0.125, 2.0, -3.0], vec![0, 1, 1], vec![true, false]).unwrap();
    write_score_file(&path, &m).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 16 + 2 + 3 * 4 + 6 * 4);
    assert_eq!(read_score_file(&path).unwrap(), m);

    let mut bad = bytes.clone();
    bad[16] = 7;
    assert!(matches!(parse_scores(&bad), Err(Error::Format { offset: 16, .. })));
    assert!(matches!(parse_scores(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    bad = bytes.clone();
    bad[3] = b'X';
    assert!(matches!(parse_scores(&bad), Err(Error::Format { offset: 0, .. })));
}
