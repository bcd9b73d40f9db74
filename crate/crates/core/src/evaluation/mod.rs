//! Generalized zero-shot evaluation.
//!
//! A calibration bias is added to every seen-composition column before the
//! argmax. Sweeping it from very negative to very positive moves the
//! classifier from predicting only unseen to only seen compositions; the
//! seen/unseen accuracy pairs form the curve whose best harmonic mean and
//! area summarize the model.

mod files;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::FeatureSet;
use crate::labelspace::{LabelSpace, Split, SplitSpec};
use crate::model::{compose_scores, C2CModel, InferenceMode};

pub use files::{
    curve_csv, export_curve, read_curve, read_report, read_score_file, write_score_file, SCORE_MAGIC, SCORE_VERSION,
};

/// Test samples by candidate compositions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    cols: usize,
    ground_truth: Vec<usize>,
    seen: Vec<bool>,
}

impl ScoreMatrix {
    /// `scores` is row-major `ground_truth.len() x seen.len()`.
    pub fn new(scores: Vec<f64>, ground_truth: Vec<usize>, seen: Vec<bool>) -> Result<Self> {
        let cols = seen.len();
        if scores.len() != ground_truth.len() * cols {
            return Err(Error::Shape(format!(
                "{} scores for {} samples x {cols} compositions",
                scores.len(),
                ground_truth.len()
            )));
        }
        if let Some(&bad) = ground_truth.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidInput(format!("ground truth {bad} outside {cols} compositions")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("scores must be finite".into()));
        }
        if !ground_truth.iter().any(|&t| seen[t]) || !ground_truth.iter().any(|&t| !seen[t]) {
            return Err(Error::InvalidInput("need at least one seen and one unseen sample".into()));
        }
        Ok(Self {
            scores,
            cols,
            ground_truth,
            seen,
        })
    }

    pub fn rows(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn ground_truth(&self) -> &[usize] {
        &self.ground_truth
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    /// Argmax of row `i` after adding `bias` to seen columns; ties go to the
    /// lowest column.
    pub fn predict(&self, i: usize, bias: f64) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, (&s, &seen)) in self.row(i).iter().zip(&self.seen).enumerate() {
            let v = if seen { s + bias } else { s };
            if v > best_score {
                best = k;
                best_score = v;
            }
        }
        best
    }

    /// `(seen accuracy, unseen accuracy)` at `bias`, each over the samples
    /// whose ground truth is seen or unseen respectively.
    pub fn accuracies(&self, bias: f64) -> (f64, f64) {
        let (mut hit, mut total) = ([0usize; 2], [0usize; 2]);
        for (i, &t) in self.ground_truth.iter().enumerate() {
            let g = usize::from(!self.seen[t]);
            total[g] += 1;
            hit[g] += usize::from(self.predict(i, bias) == t);
        }
        (hit[0] as f64 / total[0] as f64, hit[1] as f64 / total[1] as f64)
    }

    /// Largest minus smallest score.
    pub fn span(&self) -> f64 {
        let (lo, hi) = self
            .scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        hi - lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

/// Points in strictly increasing bias order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepCurve {
    pub points: Vec<CurvePoint>,
}

impl SweepCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Accuracy pairs at every bias where some sample's prediction can switch
/// between its best seen and best unseen column, at the midpoints between
/// consecutive switch points, and at two sentinels beyond every switch.
pub fn bias_sweep(scores: &ScoreMatrix) -> Result<SweepCurve> {
    let mut flips: Vec<f64> = (0..scores.rows())
        .filter_map(|i| {
            let row = scores.row(i);
            let best = |want_seen: bool| {
                row.iter()
                    .zip(scores.seen())
                    .filter(|(_, &s)| s == want_seen)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let (s, u) = (best(true), best(false));
            (s.is_finite() && u.is_finite()).then_some(u - s)
        })
        .collect();
    flips.sort_by(f64::total_cmp);
    flips.dedup();
    let sentinel = scores.span() + 1.0;
    let mut candidates = Vec::with_capacity(2 * flips.len() + 2);
    candidates.push(-sentinel);
    for (k, &d) in flips.iter().enumerate() {
        if k > 0 {
            let mid = 0.5 * (flips[k - 1] + d);
            if mid > flips[k - 1] && mid < d {
                candidates.push(mid);
            }
        }
        candidates.push(d);
    }
    candidates.push(sentinel);
    let points = candidates
        .into_iter()
        .map(|bias| {
            let (seen, unseen) = scores.accuracies(bias);
            CurvePoint { bias, seen, unseen }
        })
        .collect();
    Ok(SweepCurve { points })
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Trapezoid area under the unseen-vs-seen polyline, in bias order.
pub fn curve_auc(curve: &SweepCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].seen - w[0].seen) * (w[0].unseen + w[1].unseen) / 2.0)
        .sum()
}

/// Independent component scores of the evaluated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScores {
    /// per sample, `N_v` verb scores
    pub verb: Vec<Vec<f64>>,
    /// per sample, `N_o` object scores
    pub object: Vec<Vec<f64>>,
    pub verb_truth: Vec<usize>,
    pub object_truth: Vec<usize>,
    /// `(verb, object)` of each score-matrix column
    pub columns: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// argmax accuracy of the verb head; absent for external score files
    pub verb_acc: Option<f64>,
    pub object_acc: Option<f64>,
    /// verb and object of the top composition at zero bias
    pub verb_acc_composed: Option<f64>,
    pub object_acc_composed: Option<f64>,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
    /// the first curve point reaching `best_hm`
    pub best_hm_bias: f64,
    pub seen_at_best_hm: f64,
    pub unseen_at_best_hm: f64,
}

pub fn metrics(curve: &SweepCurve, scores: &ScoreMatrix, components: Option<&ComponentScores>) -> Result<EvalReport> {
    let first = curve
        .points
        .first()
        .ok_or_else(|| Error::InvalidInput("empty curve".into()))?;
    let mut best = *first;
    let mut best_hm = harmonic_mean(first.seen, first.unseen);
    for p in &curve.points[1..] {
        let h = harmonic_mean(p.seen, p.unseen);
        if h > best_hm {
            best_hm = h;
            best = *p;
        }
    }
    let max = |f: fn(&CurvePoint) -> f64| curve.points.iter().map(f).fold(0.0, f64::max);
    let mut report = EvalReport {
        verb_acc: None,
        object_acc: None,
        verb_acc_composed: None,
        object_acc_composed: None,
        best_seen: max(|p| p.seen),
        best_unseen: max(|p| p.unseen),
        best_hm,
        auc: curve_auc(curve),
        best_hm_bias: best.bias,
        seen_at_best_hm: best.seen,
        unseen_at_best_hm: best.unseen,
    };
    if let Some(c) = components {
        let n = scores.rows();
        if c.verb.len() != n || c.object.len() != n || c.verb_truth.len() != n || c.object_truth.len() != n {
            return Err(Error::Shape("component scores do not match the score matrix".into()));
        }
        if c.columns.len() != scores.cols() {
            return Err(Error::Shape("column labels do not match the score matrix".into()));
        }
        let acc = |rows: &[Vec<f64>], truth: &[usize]| -> f64 {
            let hits = rows.iter().zip(truth).filter(|(r, &t)| argmax(r) == Some(t)).count();
            hits as f64 / n as f64
        };
        report.verb_acc = Some(acc(&c.verb, &c.verb_truth));
        report.object_acc = Some(acc(&c.object, &c.object_truth));
        let (mut vh, mut oh) = (0usize, 0usize);
        for i in 0..n {
            let (v, o) = c.columns[scores.predict(i, 0.0)];
            vh += usize::from(v == c.verb_truth[i]);
            oh += usize::from(o == c.object_truth[i]);
        }
        report.verb_acc_composed = Some(vh as f64 / n as f64);
        report.object_acc_composed = Some(oh as f64 / n as f64);
    }
    Ok(report)
}

fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Everything an evaluation run produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub matrix: ScoreMatrix,
    pub components: ComponentScores,
    pub curve: SweepCurve,
    pub report: EvalReport,
}

/// Scores the samples of `which` against every feasible composition.
pub fn score_split(
    model: &C2CModel,
    features: &FeatureSet,
    space: &LabelSpace,
    split: &SplitSpec,
    which: Split,
    mode: InferenceMode,
) -> Result<(ScoreMatrix, ComponentScores)> {
    let samples = split.samples(which);
    let records = features.resolve(space, samples)?;
    let feasible: Vec<usize> = split.feasible_compositions().into_iter().collect();
    let columns: Vec<(usize, usize)> = feasible.iter().map(|&c| space.composition(c)).collect();
    let seen: Vec<bool> = feasible.iter().map(|&c| split.is_seen(c)).collect();

    let mut scores = Vec::with_capacity(samples.len() * columns.len());
    let mut truth = Vec::with_capacity(samples.len());
    let mut components = ComponentScores {
        verb: Vec::with_capacity(samples.len()),
        object: Vec::with_capacity(samples.len()),
        verb_truth: Vec::with_capacity(samples.len()),
        object_truth: Vec::with_capacity(samples.len()),
        columns: columns.clone(),
    };
    for s in samples {
        let col = feasible
            .binary_search(&s.composition)
            .map_err(|_| Error::InvalidInput(format!("sample `{}` is outside the feasible set", s.sample_id)))?;
        truth.push(col);
        let (v, o) = space.composition(s.composition);
        components.verb_truth.push(v);
        components.object_truth.push(o);
    }
    for chunk in records.chunks(64) {
        let videos = features.batch(chunk)?;
        for bundle in model.score_batch(&videos, features.shape.frames)? {
            scores.extend(compose_scores(&bundle, &columns, mode)?);
            components.verb.push(bundle.verb);
            components.object.push(bundle.object);
        }
    }
    Ok((ScoreMatrix::new(scores, truth, seen)?, components))
}

pub fn evaluate(
    model: &C2CModel,
    features: &FeatureSet,
    space: &LabelSpace,
    split: &SplitSpec,
    which: Split,
    mode: InferenceMode,
) -> Result<Evaluation> {
    let (matrix, components) = score_split(model, features, space, split, which, mode)?;
    let curve = bias_sweep(&matrix)?;
    let report = metrics(&curve, &matrix, Some(&components))?;
    Ok(Evaluation {
        matrix,
        components,
        curve,
        report,
    })
}

#[cfg(test)]
mod tests;
