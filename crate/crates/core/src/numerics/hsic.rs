//! Hilbert-Schmidt independence criterion.
//!
//! The estimator is the biased empirical form
//! `hsic(K, L) = trace(K H L H) / (n - 1)^2` with `H = I - 11^T / n`, scaled by
//! `sqrt(hsic(K, K) * hsic(L, L))` so that values live in `[0, 1]`.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NORMALIZER_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `exp(-|x - y|^2 / (2 s^2))` with `s` the median pairwise distance.
    GaussianMedian,
    /// `<x, y>`; used for label matrices.
    Linear,
}

/// Median of the pairwise Euclidean distances between rows.
///
/// Falls back to the mean positive distance when more than half of the
/// pairs coincide, and to 1 when every row is identical.
pub fn median_bandwidth(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        return median;
    }
    let positive: Vec<f64> = dists.into_iter().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    }
}

/// Gram matrix of the rows of `x`.
pub fn kernel_matrix(g: &mut Graph, x: Var, kernel: Kernel) -> Result<Var> {
    match kernel {
        Kernel::Linear => g.matmul_bt(x, x),
        Kernel::GaussianMedian => {
            let value = g.value(x).clone();
            let s = g.bandwidth(|| median_bandwidth(&value));
            let d = g.pairwise_sq_dist(x);
            let scaled = g.scale(d, -1.0 / (2.0 * s * s));
            Ok(g.exp(scaled))
        }
    }
}

/// `trace(K H L H) / (n - 1)^2` for symmetric Gram matrices.
pub fn hsic_from_kernels(g: &mut Graph, k: Var, l: Var) -> Result<Var> {
    let n = g.value(k).rows();
    if n < 2 {
        return Err(Error::InvalidInput(format!("hsic needs at least 2 samples, got {n}")));
    }
    // trace(KHLH) = sum((HKH) .* L) because H is idempotent and L symmetric.
    let hkh = g.double_center(k)?;
    let prod = g.mul(hkh, l)?;
    let s = g.sum(prod);
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(g.scale(s, 1.0 / denom))
}

/// Unnormalized empirical HSIC.
pub fn hsic_unnormalized(g: &mut Graph, x: Var, kx: Kernel, y: Var, ky: Kernel) -> Result<Var> {
    check_pair(g, x, y)?;
    let k = kernel_matrix(g, x, kx)?;
    let l = kernel_matrix(g, y, ky)?;
    hsic_from_kernels(g, k, l)
}

/// Normalized HSIC in `[0, 1]`; a degenerate batch (either self-term zero)
/// yields a constant 0.
pub fn hsic(g: &mut Graph, x: Var, kx: Kernel, y: Var, ky: Kernel) -> Result<Var> {
    check_pair(g, x, y)?;
    let k = kernel_matrix(g, x, kx)?;
    let l = kernel_matrix(g, y, ky)?;
    let kl = hsic_from_kernels(g, k, l)?;
    let kk = hsic_from_kernels(g, k, k)?;
    let ll = hsic_from_kernels(g, l, l)?;
    let norm_sq = g.value(kk).item() * g.value(ll).item();
    if !(norm_sq > 0.0) {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let prod = g.mul(kk, ll)?;
    let root = g.sqrt(prod);
    let denom = g.add_scalar(root, NORMALIZER_EPS);
    g.div(kl, denom)
}

/// Normalized HSIC of two value matrices, outside any training graph.
pub fn hsic_value(x: &Tensor, kx: Kernel, y: &Tensor, ky: Kernel) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let h = hsic(&mut g, xv, kx, yv, ky)?;
    Ok(g.value(h).item())
}

fn check_pair(g: &Graph, x: Var, y: Var) -> Result<()> {
    let (nx, ny) = (g.value(x).rows(), g.value(y).rows());
    if nx != ny {
        return Err(Error::Shape(format!("hsic rows differ: {nx} vs {ny}")));
    }
    if nx < 2 {
        return Err(Error::InvalidInput(format!("hsic needs at least 2 samples, got {nx}")));
    }
    Ok(())
}
