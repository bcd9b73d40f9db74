//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so a single reverse sweep in
//! [`Graph::backward`] visits each node after all of its consumers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    DivRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GroupMean(Var, usize),
    BlockMean(Var, usize),
    TemporalShift(Var, usize, isize),
    PairRows(Var, Var),
    Gather(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    PairwiseSqDist(Var),
    DoubleCenter(Var),
    SoftmaxCe {
        logits: Var,
        weights: Tensor,
        probs: Tensor,
        tau: f64,
    },
    WeightedSum(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Kernel bandwidths chosen during a forward pass.
///
/// Bandwidths are constants with respect to gradients. Replaying a recorded
/// sequence lets finite-difference probes evaluate the same function the
/// analytic gradient differentiates.
#[derive(Debug, Default, Clone)]
pub struct BandwidthTape {
    recorded: Vec<f64>,
    replay: Option<Vec<f64>>,
    cursor: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bandwidths: BandwidthTape,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,m] += a[n,k] * b[m,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,m] += a[n,k]^T * b[n,m]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Order-independent sum: identical multisets give bitwise identical results.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose kernel bandwidths are taken from `tape` in order.
    pub fn with_bandwidth_replay(tape: Vec<f64>) -> Self {
        Self {
            nodes: Vec::new(),
            bandwidths: BandwidthTape {
                recorded: Vec::new(),
                replay: Some(tape),
                cursor: 0,
            },
        }
    }

    pub fn recorded_bandwidths(&self) -> &[f64] {
        &self.bandwidths.recorded
    }

    pub(crate) fn bandwidth(&mut self, compute: impl FnOnce() -> f64) -> f64 {
        let tape = &mut self.bandwidths;
        let value = match &tape.replay {
            Some(values) => {
                let v = values.get(tape.cursor).copied().unwrap_or_else(compute);
                tape.cursor += 1;
                v
            }
            None => compute(),
        };
        tape.recorded.push(value);
        value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (k2, m)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (m, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul_bt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    /// Adds a `[1, m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((n, m), (r, m2)) = (self.dims(a), self.dims(row));
        if r != 1 || m != m2 {
            return Err(shape_err("add_row", self.value(a), self.value(row)));
        }
        let (ta, tr) = (self.value(a), self.value(row));
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for (x, b) in data[i * m..(i + 1) * m].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// Divides row `i` of `a` by `s[i, 0]`.
    pub fn div_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let ((n, m), (r, c)) = (self.dims(a), self.dims(s));
        if r != n || c != 1 {
            return Err(shape_err("div_rows", self.value(a), self.value(s)));
        }
        let (ta, ts) = (self.value(a), self.value(s));
        let mut data = ta.data().to_vec();
        for i in 0..n {
            let d = ts.data()[i];
            data[i * m..(i + 1) * m].iter_mut().for_each(|x| *x /= d);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::DivRows(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sqrt(a), rg)
    }

    /// Sum of all entries as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `[n, m] -> [n, 1]`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (n, _) = self.dims(a);
        let t = self.value(a);
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let t = Tensor::new(vec![n, 1], data).expect("row_sum shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::RowSum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(n, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end`; an empty range yields an `[n, 0]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if start > end || end > m {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {m} columns")));
        }
        let t = self.value(a);
        let data = (0..n).flat_map(|i| t.row(i)[start..end].iter().copied()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, end - start, data)?, Op::SliceCols(a, start), rg))
    }

    /// Mean of each run of `len` consecutive rows: `[g*len, m] -> [g, m]`.
    ///
    /// Each mean is summed in sorted order, so reordering rows inside a group
    /// leaves the result bitwise unchanged.
    pub fn group_mean(&mut self, a: Var, len: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if len == 0 || n % len != 0 {
            return Err(Error::Shape(format!("group_mean: {n} rows not divisible by {len}")));
        }
        let groups = n / len;
        let t = self.value(a);
        let mut data = vec![0.0; groups * m];
        let mut buf = vec![0.0; len];
        for g in 0..groups {
            for c in 0..m {
                for (r, slot) in buf.iter_mut().enumerate() {
                    *slot = t.at(g * len + r, c);
                }
                data[g * m + c] = sorted_sum(&mut buf) / len as f64;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(groups, m, data)?, Op::GroupMean(a, len), rg))
    }

    /// Mean over `blocks` stacked blocks: `[blocks*n, m] -> [n, m]`.
    pub fn block_mean(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let (rows, m) = self.dims(a);
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::Shape(format!("block_mean: {rows} rows not divisible by {blocks}")));
        }
        let n = rows / blocks;
        let t = self.value(a);
        let mut data = vec![0.0; n * m];
        for b in 0..blocks {
            for (o, v) in data.iter_mut().zip(&t.data()[b * n * m..(b + 1) * n * m]) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|x| *x /= blocks as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::BlockMean(a, blocks), rg))
    }

    /// Row `g*len + t` of the output is row `g*len + clamp(t + offset)` of
    /// the input: a time shift with edge replication inside each sequence.
    pub fn temporal_shift(&mut self, a: Var, len: usize, offset: isize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if len == 0 || n % len != 0 {
            return Err(Error::Shape(format!("temporal_shift: {n} rows not divisible by {len}")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            data.extend_from_slice(t.row(shifted_row(r, len, offset)));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::TemporalShift(a, len, offset), rg))
    }

    /// Every pairing of a row of `a` with a row of `b`, concatenated:
    /// `[p, c1] x [q, c2] -> [p*q, c1+c2]`, row `i*q + j = [a_i, b_j]`.
    pub fn pair_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((p, c1), (q, c2)) = (self.dims(a), self.dims(b));
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(p * q * (c1 + c2));
        for i in 0..p {
            for j in 0..q {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(j));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(p * q, c1 + c2, data)?, Op::PairRows(a, b), rg))
    }

    /// Picks flat entries of `a` by index into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of {}", t.len())));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gather(a, indices), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let t = self.value(a);
        let mut norms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numerical(format!("row {i} has norm {norm}")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::L2NormalizeRows(a, norms), rg))
    }

    /// Squared Euclidean distances between all row pairs: `[n, d] -> [n, n]`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let (n, _) = self.dims(a);
        let t = self.value(a);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(n, n, data).expect("square"), Op::PairwiseSqDist(a), rg)
    }

    /// `H K H` with the centering matrix `H = I - 11^T/n`.
    pub fn double_center(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if n != m {
            return Err(Error::Shape(format!("double_center needs a square matrix, got {n}x{m}")));
        }
        let out = center(self.value(a).data(), n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, n, out)?, Op::DoubleCenter(a), rg))
    }

    /// Batch-mean weighted softmax cross-entropy on `logits / tau`.
    ///
    /// Row `b` contributes `sum_k weights[b,k] * -log softmax(row_b)[k]`, the
    /// softmax running only over columns where `mask` is true. Hard labels
    /// are one-hot weight rows; mixed labels spread weight over columns.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        weights: Tensor,
        mask: Option<&[bool]>,
        tau: f64,
    ) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
        }
        let (n, m) = self.dims(logits);
        if weights.rows() != n || weights.cols() != m || mask.is_some_and(|mk| mk.len() != n * m) {
            return Err(shape_err("softmax_cross_entropy", self.value(logits), &weights));
        }
        let z = self.value(logits);
        let valid = |i: usize| mask.is_none_or(|mk| mk[i]);
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for b in 0..n {
            let cols: Vec<usize> = (0..m).filter(|&k| valid(b * m + k)).collect();
            for k in 0..m {
                if !valid(b * m + k) && weights.at(b, k) != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "target column {k} of row {b} is masked out"
                    )));
                }
            }
            if cols.is_empty() {
                continue;
            }
            let mx = cols.iter().map(|&k| z.at(b, k) / tau).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + cols.iter().map(|&k| (z.at(b, k) / tau - mx).exp()).sum::<f64>().ln();
            for &k in &cols {
                let logp = z.at(b, k) / tau - lse;
                probs[b * m + k] = logp.exp();
                let w = weights.at(b, k);
                if w != 0.0 {
                    loss -= w * logp;
                }
            }
        }
        let value = Tensor::scalar(loss / n.max(1) as f64);
        let rg = self.rg(&[logits]);
        let probs = Tensor::matrix(n, m, probs)?;
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                weights,
                probs,
                tau,
            },
            rg,
        ))
    }

    /// `sum(a * w)` for a constant `w`.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.len() != w.len() {
            return Err(shape_err("weighted_sum", t, &w));
        }
        let s = t.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), rg))
    }

    /// Reverse sweep from the scalar `loss`. Gradients accumulate into every
    /// node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape")
        };
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((n, k), (_, m)) = (self.dims(*a), self.dims(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt(dy.data(), self.value(*b).data(), &mut da, n, m, k);
                    acc(*a, like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(self.value(*a).data(), dy.data(), &mut db, n, k, m);
                    acc(*b, like(*b, db));
                }
            }
            Op::MatMulBt(a, b) => {
                let ((n, k), (m, _)) = (self.dims(*a), self.dims(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nn(dy.data(), self.value(*b).data(), &mut da, n, m, k);
                    acc(*a, like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; m * k];
                    gemm_tn(dy.data(), self.value(*a).data(), &mut db, n, m, k);
                    acc(*b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(tb.data()).map(|(g, x)| g * x).collect();
                let db = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(tb.data()).map(|(g, d)| g / d).collect();
                let db = dy
                    .data()
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(g, (n, d))| -g * n / (d * d))
                    .collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::AddRow(a, row) => {
                let (n, m) = self.dims(*a);
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for (o, g) in db.iter_mut().zip(dy.row(i)) {
                        *o += g;
                    }
                }
                acc(*a, dy.clone());
                acc(*row, like(*row, db));
            }
            Op::DivRows(a, s) => {
                let (n, m) = self.dims(*a);
                let (ta, ts) = (self.value(*a), self.value(*s));
                let mut da = vec![0.0; n * m];
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    let d = ts.data()[i];
                    for c in 0..m {
                        let g = dy.at(i, c);
                        da[i * m + c] = g / d;
                        ds[i] -= g * ta.at(i, c) / (d * d);
                    }
                }
                acc(*a, like(*a, da));
                acc(*s, like(*s, ds));
            }
            Op::Scale(a, c) => acc(*a, dy.map(|g| g * c)),
            Op::AddScalar(a) => acc(*a, dy.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let da = dy.data().iter().zip(x.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                acc(*a, like(*a, da));
            }
            Op::Exp(a) => {
                let da = dy.data().iter().zip(y.data()).map(|(g, v)| g * v).collect();
                acc(*a, like(*a, da));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let da = dy.data().iter().zip(x.data()).map(|(g, v)| g / v).collect();
                acc(*a, like(*a, da));
            }
            Op::Sqrt(a) => {
                let da = dy.data().iter().zip(y.data()).map(|(g, v)| g / (2.0 * v)).collect();
                acc(*a, like(*a, da));
            }
            Op::Sum(a) => {
                let g = dy.item();
                let n = self.value(*a).len();
                acc(*a, like(*a, vec![g; n]));
            }
            Op::RowSum(a) => {
                let (n, m) = self.dims(*a);
                let da = (0..n).flat_map(|i| std::iter::repeat_n(dy.data()[i], m)).collect();
                acc(*a, like(*a, da));
            }
            Op::ConcatCols(parts) => {
                let n = dy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let dp = (0..n).flat_map(|i| dy.row(i)[offset..offset + w].iter().copied()).collect();
                    acc(p, like(p, dp));
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims(*a);
                let w = dy.cols();
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    da[i * m + start..i * m + start + w].copy_from_slice(dy.row(i));
                }
                acc(*a, like(*a, da));
            }
            Op::GroupMean(a, len) => {
                let n = self.dims(*a).0;
                let inv = 1.0 / *len as f64;
                let da = (0..n).flat_map(|r| dy.row(r / len).iter().map(move |g| g * inv)).collect();
                acc(*a, like(*a, da));
            }
            Op::BlockMean(a, blocks) => {
                let inv = 1.0 / *blocks as f64;
                let block: Vec<f64> = dy.data().iter().map(|g| g * inv).collect();
                let da = block.iter().copied().cycle().take(block.len() * blocks).collect();
                acc(*a, like(*a, da));
            }
            Op::TemporalShift(a, len, offset) => {
                let (n, m) = self.dims(*a);
                let mut da = vec![0.0; n * m];
                for r in 0..n {
                    let src = shifted_row(r, *len, *offset);
                    for (o, g) in da[src * m..(src + 1) * m].iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::PairRows(a, b) => {
                let ((p, c1), (q, c2)) = (self.dims(*a), self.dims(*b));
                let mut da = vec![0.0; p * c1];
                let mut db = vec![0.0; q * c2];
                for i in 0..p {
                    for j in 0..q {
                        let row = dy.row(i * q + j);
                        for (o, g) in da[i * c1..(i + 1) * c1].iter_mut().zip(&row[..c1]) {
                            *o += g;
                        }
                        for (o, g) in db[j * c2..(j + 1) * c2].iter_mut().zip(&row[c1..]) {
                            *o += g;
                        }
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Gather(a, indices) => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (&i, g) in indices.iter().zip(dy.data()) {
                    da[i] += g;
                }
                acc(*a, like(*a, da));
            }
            Op::L2NormalizeRows(a, norms) => {
                let (n, m) = self.dims(*a);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(u, g)| u * g).sum();
                    for c in 0..m {
                        da[i * m + c] = (gr[c] - yr[c] * dot) / norms[i];
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::PairwiseSqDist(a) => {
                let (n, d) = self.dims(*a);
                let x = self.value(*a);
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (dy.at(i, j) + dy.at(j, i));
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            da[i * d + c] += w * (x.at(i, c) - x.at(j, c));
                        }
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::DoubleCenter(a) => {
                let n = dy.rows();
                acc(*a, like(*a, center(dy.data(), n)));
            }
            Op::SoftmaxCe {
                logits,
                weights,
                probs,
                tau,
            } => {
                let (n, m) = self.dims(*logits);
                let g = dy.item() / (n as f64 * tau);
                let mut dz = vec![0.0; n * m];
                for b in 0..n {
                    let total: f64 = weights.row(b).iter().sum();
                    for k in 0..m {
                        dz[b * m + k] = g * (probs.at(b, k) * total - weights.at(b, k));
                    }
                }
                acc(*logits, like(*logits, dz));
            }
            Op::WeightedSum(a, w) => {
                let g = dy.item();
                acc(*a, like(*a, w.data().iter().map(|x| x * g).collect()));
            }
        }
    }
}

fn shifted_row(r: usize, len: usize, offset: isize) -> usize {
    let (g, t) = (r / len, (r % len) as isize);
    let src = (t + offset).clamp(0, len as isize - 1) as usize;
    g * len + src
}

fn center(k: &[f64], n: usize) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() * inv).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() * inv).collect();
    let mean = row_mean.iter().sum::<f64>() * inv;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row_mean[i] - col_mean[j] + mean;
        }
    }
    out
}
