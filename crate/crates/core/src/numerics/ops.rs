//! Layer-level operations composed from graph primitives.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_similarity(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.l2_normalize_rows(a)?;
    let nb = g.l2_normalize_rows(b)?;
    g.matmul_bt(na, nb)
}

/// `x * weight + bias` with `weight: [in, out]` and `bias: [1, out]`.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_row(y, bias)
}

/// Kernel-3 temporal convolution over sequences of `len` rows.
///
/// `x` stacks sequences as `[groups*len, c_in]`; `weight` is `[3*c_in, c_out]`
/// with the taps for `t-1`, `t`, `t+1` stacked in that order. Sequence edges
/// are padded by one replicated frame on each side.
pub fn conv1d_temporal(g: &mut Graph, x: Var, weight: Var, bias: Var, len: usize) -> Result<Var> {
    let prev = g.temporal_shift(x, len, -1)?;
    let next = g.temporal_shift(x, len, 1)?;
    let taps = g.concat_cols(&[prev, x, next])?;
    linear(g, taps, weight, bias)
}

/// Mean over each run of `len` consecutive rows.
pub fn mean_over_time(g: &mut Graph, x: Var, len: usize) -> Result<Var> {
    g.group_mean(x, len)
}

/// Batch-mean cross-entropy of `softmax(logits / tau)` against class indices.
pub fn softmax_cross_entropy_with_temperature(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    tau: f64,
) -> Result<Var> {
    let (n, m) = (g.value(logits).rows(), g.value(logits).cols());
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    let weights = one_hot(targets, m)?;
    g.softmax_cross_entropy(logits, weights, None, tau)
}

/// `[targets.len(), classes]` one-hot rows.
pub fn one_hot(targets: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * classes];
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::InvalidInput(format!("class {t} out of {classes}")));
        }
        data[r * classes + t] = 1.0;
    }
    Tensor::matrix(targets.len(), classes, data)
}
