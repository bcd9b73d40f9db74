//! Loss terms built on graph outputs of the model.
//!
//! Targets are given as weight rows: one-hot rows for plain labels, convex
//! combinations of two one-hot rows for CutMix labels. Cross-entropy is
//! linear in the weights, so a weighted row reproduces the mixed loss
//! `(1 - lambda) L(a_i) + lambda L(a_j)` exactly.

use crate::error::{Error, Result};
use crate::labelspace::{LabelSpace, Sample};
use crate::model::{Features, ForwardOutputs};
use crate::numerics::hsic::{hsic, Kernel};
use crate::numerics::{Graph, Tensor, Var};

/// Added to row sums before the condition loss normalizes batch-mean
/// conditional scores.
pub const CONDITION_EPS: f64 = 1e-8;

/// Observed conditional frequencies of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConditionals {
    /// `N_v x N_o`; row `v` is `count(v, o) / count(v)`
    pub object_given_verb: Tensor,
    /// `N_o x N_v`; row `o` is `count(v, o) / count(o)`
    pub verb_given_object: Tensor,
}

pub fn empirical_conditionals(space: &LabelSpace, train: &[Sample]) -> Result<EmpiricalConditionals> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let (nv, no) = (space.num_verbs(), space.num_objects());
    let mut counts = vec![0.0; nv * no];
    for s in train {
        if s.composition >= space.num_compositions() {
            return Err(Error::InvalidInput(format!("composition {} out of range", s.composition)));
        }
        let (v, o) = space.composition(s.composition);
        counts[v * no + o] += 1.0;
    }
    let mut ogv = counts.clone();
    for row in ogv.chunks_mut(no) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    let mut vgo = vec![0.0; no * nv];
    for o in 0..no {
        let total: f64 = (0..nv).map(|v| counts[v * no + o]).sum();
        if total > 0.0 {
            for v in 0..nv {
                vgo[o * nv + v] = counts[v * no + o] / total;
            }
        }
    }
    Ok(EmpiricalConditionals {
        object_given_verb: Tensor::matrix(nv, no, ogv)?,
        verb_given_object: Tensor::matrix(no, nv, vgo)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ComponentLoss {
    pub verb: Var,
    pub object: Var,
    /// `verb + object`
    pub total: Var,
}

/// Temperature softmax cross-entropy of the cosine component scores.
pub fn component_loss(
    g: &mut Graph,
    verb_scores: Var,
    object_scores: Var,
    verb_weights: Tensor,
    object_weights: Tensor,
    tau: f64,
) -> Result<ComponentLoss> {
    let verb = g.softmax_cross_entropy(verb_scores, verb_weights, None, tau)?;
    let object = g.softmax_cross_entropy(object_scores, object_weights, None, tau)?;
    let total = g.add(verb, object)?;
    Ok(ComponentLoss { verb, object, total })
}

/// Cross-entropy over composition scores `[B, N_a]`, the softmax restricted
/// to columns where `train_mask` is set.
pub fn composition_loss(g: &mut Graph, scores: Var, weights: Tensor, train_mask: &[bool], tau: f64) -> Result<Var> {
    let rows = g.value(scores).rows();
    if train_mask.len() != g.value(scores).cols() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} compositions",
            train_mask.len(),
            g.value(scores).cols()
        )));
    }
    let mask: Vec<bool> = (0..rows).flat_map(|_| train_mask.iter().copied()).collect();
    g.softmax_cross_entropy(scores, weights, Some(&mask), tau)
}

#[derive(Debug, Clone, Copy)]
pub struct IndependenceTerms {
    /// `h(f_x, f_v) - h(f_v, y_v)`
    pub sup_verb: Var,
    /// `h(f_x, f_o) - h(f_o, y_o)`
    pub sup_object: Var,
    /// `h(f_v[:rho C], f_o[:rho C])`
    pub specific: Var,
    pub total: Var,
}

/// HSIC-based independence loss. Features use Gaussian kernels with the
/// median heuristic; label rows use a linear kernel.
pub fn independence_loss(
    g: &mut Graph,
    features: &Features,
    verb_labels: &Tensor,
    object_labels: &Tensor,
    rho: f64,
) -> Result<IndependenceTerms> {
    let batch = g.value(features.pooled).rows();
    if batch < 2 {
        return Err(Error::InvalidInput(format!("independence loss needs a batch of at least 2, got {batch}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
    }
    let yv = g.constant(verb_labels.clone());
    let yo = g.constant(object_labels.clone());
    let (fx, fv, fo) = (features.pooled, features.verb_feature, features.object_feature);

    let sup = |g: &mut Graph, f: Var, y: Var| -> Result<Var> {
        let spurious = hsic(g, fx, Kernel::GaussianMedian, f, Kernel::GaussianMedian)?;
        let relevant = hsic(g, f, Kernel::GaussianMedian, y, Kernel::Linear)?;
        g.sub(spurious, relevant)
    };
    let sup_verb = sup(g, fv, yv)?;
    let sup_object = sup(g, fo, yo)?;

    let k = (rho * g.value(fv).cols() as f64).floor() as usize;
    let specific = if k == 0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let sv = g.slice_cols(fv, 0, k)?;
        let so = g.slice_cols(fo, 0, k)?;
        hsic(g, sv, Kernel::GaussianMedian, so, Kernel::GaussianMedian)?
    };
    let partial = g.add(sup_verb, sup_object)?;
    let total = g.add(partial, specific)?;
    Ok(IndependenceTerms {
        sup_verb,
        sup_object,
        specific,
        total,
    })
}

/// Cross-entropy between the observed conditionals and the batch-mean
/// conditional scores, each row renormalized to sum to one.
pub fn condition_loss(g: &mut Graph, out: &ForwardOutputs, observed: &EmpiricalConditionals) -> Result<Var> {
    let v = condition_term(g, out.object_given_verb, out.batch, &observed.object_given_verb)?;
    let o = condition_term(g, out.verb_given_object, out.batch, &observed.verb_given_object)?;
    g.add(v, o)
}

fn condition_term(g: &mut Graph, table: Var, batch: usize, observed: &Tensor) -> Result<Var> {
    let mean = g.block_mean(table, batch)?;
    let (n, m) = (g.value(mean).rows(), g.value(mean).cols());
    if observed.rows() != n || observed.cols() != m {
        return Err(Error::Shape(format!(
            "observed conditionals {:?} do not match scores {n}x{m}",
            observed.shape()
        )));
    }
    let sums = g.row_sum(mean);
    let sums = g.add_scalar(sums, CONDITION_EPS);
    let rows = g.div_rows(mean, sums)?;
    let (idx, w): (Vec<usize>, Vec<f64>) = observed
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (i, -p / n as f64))
        .unzip();
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = idx.len();
    let picked = g.gather(rows, idx, vec![1, k])?;
    let logs = g.log(picked);
    g.weighted_sum(logs, Tensor::matrix(1, k, w)?)
}

/// Composition loss on the imagined pairs `(v_i, o_j)` and `(v_j, o_i)`.
///
/// `grid` holds full-mode scores of every verb-object pair, `[B, N_v*N_o]`
/// with column `v*N_o + o`. The softmax runs over the training compositions
/// plus each row's two imagined pairs, appended as extra columns when they
/// are not training compositions already.
pub fn novel_loss(
    g: &mut Graph,
    grid: Var,
    space: &LabelSpace,
    train_mask: &[bool],
    labels: &[(usize, usize)],
    partners: &[(usize, usize)],
    tau: f64,
) -> Result<Var> {
    let (nv, no) = (space.num_verbs(), space.num_objects());
    let b = labels.len();
    if partners.len() != b || g.value(grid).rows() != b || g.value(grid).cols() != nv * no {
        return Err(Error::Shape("novel_loss: inconsistent batch sizes".into()));
    }
    let na = space.num_compositions();
    let width = na + 2;
    let mut idx = Vec::with_capacity(b * width);
    let mut mask = Vec::with_capacity(b * width);
    let mut weights = vec![0.0; b * width];
    for (r, (&(vi, oi), &(vj, oj))) in labels.iter().zip(partners).enumerate() {
        idx.extend(space.compositions().iter().map(|&(v, o)| r * nv * no + v * no + o));
        mask.extend_from_slice(train_mask);
        let imagined = [(vi, oj), (vj, oi)];
        for (slot, &(v, o)) in imagined.iter().enumerate() {
            idx.push(r * nv * no + v * no + o);
            let existing = space.composition_index(v, o).filter(|&c| train_mask[c]);
            let duplicate = slot == 1 && imagined[0] == imagined[1];
            let appended = existing.is_none() && !duplicate;
            mask.push(appended);
            let col = match existing {
                Some(c) => c,
                None if duplicate => na,
                None => na + slot,
            };
            weights[r * width + col] += 1.0;
        }
    }
    let logits = g.gather(grid, idx, vec![b, width])?;
    g.softmax_cross_entropy(logits, Tensor::matrix(b, width, weights)?, Some(&mask), tau)
}
