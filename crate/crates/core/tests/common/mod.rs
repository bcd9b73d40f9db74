#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2c::evaluation::{harmonic_mean, ScoreMatrix};
use c2c::labelspace::{AnnotationRecord, SourceSplit};

/// Score matrix with at least one seen and one unseen sample. Dyadic
/// matrices use multiples of 1/16 so ties and exact flips are common.
pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, na: usize, dyadic: bool) -> ScoreMatrix {
    let mut seen: Vec<bool> = (0..na).map(|_| rng.random_bool(0.5)).collect();
    seen[0] = true;
    seen[na - 1] = false;
    let mut truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..na)).collect();
    truth[0] = 0;
    truth[n - 1] = na - 1;
    let scores = (0..n * na)
        .map(|_| {
            if dyadic {
                f64::from(rng.random_range(-16i32..=16)) / 16.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    ScoreMatrix::new(scores, truth, seen).unwrap()
}

/// Biased row argmax with the lowest index winning ties.
pub fn brute_predict(m: &ScoreMatrix, i: usize, bias: f64) -> usize {
    let row = m.row(i);
    let mut best = 0;
    for k in 1..row.len() {
        let v = if m.seen()[k] { row[k] + bias } else { row[k] };
        let b = if m.seen()[best] { row[best] + bias } else { row[best] };
        if v > b {
            best = k;
        }
    }
    best
}

pub fn brute_accuracies(m: &ScoreMatrix, bias: f64) -> (f64, f64) {
    let (mut sh, mut st, mut uh, mut ut) = (0, 0, 0, 0);
    for (i, &t) in m.ground_truth().iter().enumerate() {
        let hit = brute_predict(m, i, bias) == t;
        if m.seen()[t] {
            st += 1;
            sh += usize::from(hit);
        } else {
            ut += 1;
            uh += usize::from(hit);
        }
    }
    (sh as f64 / st as f64, uh as f64 / ut as f64)
}

/// Sorted distinct biases at which some sample's best seen and best unseen
/// columns tie.
pub fn flip_points(m: &ScoreMatrix) -> Vec<f64> {
    let mut flips = Vec::new();
    for i in 0..m.rows() {
        let (mut s, mut u) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (k, &v) in m.row(i).iter().enumerate() {
            if m.seen()[k] {
                s = s.max(v);
            } else {
                u = u.max(v);
            }
        }
        flips.push(u - s);
    }
    flips.sort_by(|a, b| a.partial_cmp(b).unwrap());
    flips.dedup();
    flips
}

/// Accuracy pairs on every region of the bias axis: below all flips, at
/// each flip, between consecutive flips, above all flips.
pub fn enumerate_regions(m: &ScoreMatrix) -> Vec<(f64, f64)> {
    let flips = flip_points(m);
    let mut out = vec![brute_accuracies(m, flips[0] - 1.0)];
    for (k, &d) in flips.iter().enumerate() {
        if k > 0 {
            out.push(brute_accuracies(m, 0.5 * (flips[k - 1] + d)));
        }
        out.push(brute_accuracies(m, d));
    }
    out.push(brute_accuracies(m, flips[flips.len() - 1] + 1.0));
    out
}

pub struct OracleMetrics {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
}

pub fn oracle_metrics(points: &[(f64, f64)]) -> OracleMetrics {
    let mut m = OracleMetrics {
        best_seen: 0.0,
        best_unseen: 0.0,
        best_hm: 0.0,
        auc: 0.0,
    };
    for (k, &(s, u)) in points.iter().enumerate() {
        m.best_seen = m.best_seen.max(s);
        m.best_unseen = m.best_unseen.max(u);
        m.best_hm = m.best_hm.max(harmonic_mean(s, u));
        if k > 0 {
            let (ps, pu) = points[k - 1];
            m.auc += (s - ps) * (pu + u) / 2.0;
        }
    }
    m
}

/// Annotation set over 5-9 verbs and objects with random composition
/// coverage, sample counts and train/test membership. A train diagonal
/// covers every verb and object and three test-only compositions keep the
/// set feasible.
pub fn random_annotations(seed: u64) -> Vec<AnnotationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nv, no): (usize, usize) = (rng.random_range(5..=9), rng.random_range(5..=9));
    let diagonal: Vec<(usize, usize)> = (0..nv.max(no)).map(|k| (k % nv, k % no)).collect();
    let mut forced_test = Vec::new();
    while forced_test.len() < 3 {
        let c = (rng.random_range(0..nv), rng.random_range(0..no));
        if !diagonal.contains(&c) && !forced_test.contains(&c) {
            forced_test.push(c);
        }
    }
    let mut out = Vec::new();
    for v in 0..nv {
        for o in 0..no {
            let (home, count, stray) = if diagonal.contains(&(v, o)) {
                (SourceSplit::Train, rng.random_range(10..=30), 0.0)
            } else if forced_test.contains(&(v, o)) {
                (SourceSplit::Test, rng.random_range(10..=30), 0.0)
            } else if rng.random_bool(0.6) {
                let home = if rng.random_bool(0.6) { SourceSplit::Train } else { SourceSplit::Test };
                (home, rng.random_range(3..=30), if rng.random_bool(0.25) { 0.3 } else { 0.0 })
            } else {
                continue;
            };
            for _ in 0..count {
                let split = match (home, rng.random_bool(stray)) {
                    (SourceSplit::Train, true) | (SourceSplit::Test, false) => SourceSplit::Test,
                    _ => SourceSplit::Train,
                };
                out.push(AnnotationRecord {
                    sample_id: format!("s{}", out.len()),
                    verb_name: format!("verb{v}"),
                    object_name: format!("object{o}"),
                    source_split: split,
                });
            }
        }
    }
    out
}
