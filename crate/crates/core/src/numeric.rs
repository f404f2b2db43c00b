//! Dense tensors, a reverse-mode tape, parameters, and Adam.
//!
//! Everything is `f64`. A [`Tape`] records one forward computation; calling
//! [`Tape::backward`] on a scalar node returns gradients for every node, and
//! [`ParamStore::accumulate`] folds the parameter gradients into the store.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix view: the leading dimension (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Product of all but the leading dimension (the whole length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// `c = a · b` for row-major `m×k` and `k×n`.
fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(a, (m, k), false, b, (k, n), false, &mut c, 0.0);
    c
}

/// `c = beta·c + op(a) · op(b)` where `op` optionally transposes. Shapes are
/// the stored (untransposed) shapes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    a_t: bool,
    b: &[f64],
    b_shape: (usize, usize),
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("lhs layout");
    let bv = ArrayView2::from_shape(b_shape, b).expect("rhs layout");
    let av = if a_t { av.reversed_axes() } else { av };
    let bv = if b_t { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("out layout");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Nll(Var, Vec<usize>),
    Bilinear {
        head: Var,
        weight: Var,
        tail: Var,
        pairs: Vec<(usize, usize)>,
        /// `[k][head row][h2]` = head · W_k
        projected: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Per-node gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives a gradient but feeds no parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The node holding parameter `id`; each parameter enters a tape once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.rows(), x.cols());
        let (k2, n) = (y.rows(), y.cols());
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul(&x.data, m, k, &y.data, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("add", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let shape = x.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    /// Adds a length-`n` row (e.g. a bias) to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        if r.len() != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape, r.shape)));
        }
        let data = x.data.iter().enumerate().map(|(i, v)| v + r.data[i % n]).collect();
        let t = Tensor::matrix(x.rows(), n, data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("mul", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let shape = x.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * factor).collect(),
        };
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len().checked_div(cols).unwrap_or(0);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Embedding lookup: rows of `table` at `index`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::shape("gather", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(Tensor::matrix(index.len(), cols, data)?, Op::Gather(table, index.to_vec())))
    }

    /// Column-wise max over each row range of `x`; one output row per segment.
    pub fn segment_max(&mut self, x: Var, segments: &[std::ops::Range<usize>]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(segments.len() * cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for seg in segments {
            if seg.is_empty() || seg.end > rows {
                return Err(Error::shape("segment_max", format!("segment {seg:?} of {rows} rows")));
            }
            for c in 0..cols {
                let mut best = seg.start;
                for r in seg.clone() {
                    if t.data[r * cols + c] > t.data[best * cols + c] {
                        best = r;
                    }
                }
                data.push(t.data[best * cols + c]);
                argmax.push(best);
            }
        }
        Ok(self.push(Tensor::matrix(segments.len(), cols, data)?, Op::SegmentMax(x, argmax)))
    }

    /// Max over all rows of `x`.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.segment_max(x, &[0..rows])
    }

    /// Hash of every piecewise choice on the tape: which ReLU inputs are
    /// positive and which rows win each max-pooling. Computations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).data.iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::SegmentMax(_, argmax) => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(t, Op::Relu(a))
    }

    /// Inverted dropout. With `train = false` or `rate = 0` this is the identity
    /// and draws nothing from `rng`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Numeric(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(t, Op::Dropout(a, mask)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let t = Tensor {
            shape: vec![x.rows(), cols],
            data,
        };
        self.push(t, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor {
            shape: vec![x.rows(), cols],
            data,
        };
        self.push(t, Op::LogSoftmax(a))
    }

    /// Summed negative log-likelihood of `targets` under row-wise log-probabilities.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(log_probs);
        if x.rows() != targets.len() {
            return Err(Error::shape("nll", format!("{} rows, {} targets", x.rows(), targets.len())));
        }
        let cols = x.cols();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::shape("nll", format!("target {t} of {cols} classes")));
            }
            total -= x.data[r * cols + t];
        }
        Ok(self.push(Tensor::scalar(total), Op::Nll(log_probs, targets.to_vec())))
    }

    /// Pairwise bilinear form: row `p` of the output is
    /// `[head[i_p]ᵀ W[:, c, :] tail[j_p]]_c` for `W` of shape `[h1, k, h2]`.
    /// That layout makes `head · W` a single `[h1, k·h2]` product.
    pub fn bilinear(&mut self, head: Var, weight: Var, tail: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (a, w, b) = (self.value(head), self.value(weight), self.value(tail));
        if w.shape.len() != 3 {
            return Err(Error::shape("bilinear", format!("weight shape {:?}", w.shape)));
        }
        let (h1, k, h2) = (w.shape[0], w.shape[1], w.shape[2]);
        let (na, nb) = (a.rows(), b.rows());
        if a.cols() != h1 || b.cols() != h2 {
            return Err(Error::shape(
                "bilinear",
                format!("{:?} · {:?} · {:?}", a.shape, w.shape, b.shape),
            ));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= na || j >= nb) {
            return Err(Error::shape("bilinear", format!("pair ({i}, {j}) outside {na}x{nb}")));
        }
        // projected[i, c, :] = a[i, :] · W[:, c, :]
        let mut projected = vec![0.0; na * k * h2];
        gemm(&a.data, (na, h1), false, &w.data, (h1, k * h2), false, &mut projected, 0.0);
        let mut data = Vec::with_capacity(pairs.len() * k);
        for &(i, j) in pairs {
            let bj = b.row(j);
            for c in 0..k {
                let p = &projected[(i * k + c) * h2..(i * k + c + 1) * h2];
                data.push(p.iter().zip(bj).map(|(x, y)| x * y).sum());
            }
        }
        let t = Tensor::matrix(pairs.len(), k, data)?;
        Ok(self.push(
            t,
            Op::Bilinear {
                head,
                weight,
                tail,
                pairs: pairs.to_vec(),
                projected,
            },
        ))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a single value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (x.rows(), x.cols(), y.cols());
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let ga = acc(&mut grads, *a, m * k);
                    gemm(&g, (m, n), false, &y.data, (k, n), true, ga, 1.0);
                    let gb = acc(&mut grads, *b, k * n);
                    gemm(&x.data, (m, k), true, &g, (m, n), false, gb, 1.0);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let t = acc(&mut grads, v, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                }
                Op::AddRow(a, row) => {
                    let n = len_of(*row);
                    let t = acc(&mut grads, *a, g.len());
                    t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    let r = acc(&mut grads, *row, n);
                    for (i, gv) in g.iter().enumerate() {
                        r[i % n] += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                    let ta = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ta[i] += g[i] * y[i];
                    }
                    let tb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        tb[i] += g[i] * x[i];
                    }
                }
                Op::Scale(a, f) => {
                    let t = acc(&mut grads, *a, g.len());
                    t.iter_mut().zip(&g).for_each(|(t, g)| *t += g * f);
                }
                Op::Sum(a) => {
                    let n = len_of(*a);
                    let t = acc(&mut grads, *a, n);
                    t.iter_mut().for_each(|t| *t += g[0]);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let t = acc(&mut grads, p, rows * c);
                        for r in 0..rows {
                            for k in 0..c {
                                t[r * c + k] += g[r * total + offset + k];
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = len_of(p);
                        let t = acc(&mut grads, p, n);
                        for k in 0..n {
                            t[k] += g[offset + k];
                        }
                        offset += n;
                    }
                }
                Op::Gather(table, index) => {
                    let cols = self.value(*table).cols();
                    let t = acc(&mut grads, *table, len_of(*table));
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..cols {
                            t[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::SegmentMax(x, argmax) => {
                    let cols = self.value(*x).cols();
                    let t = acc(&mut grads, *x, len_of(*x));
                    for (o, &src) in argmax.iter().enumerate() {
                        t[src * cols + o % cols] += g[o];
                    }
                }
                Op::Relu(a) => {
                    let x = &self.value(*a).data;
                    let t = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            t[i] += g[i];
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let t = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        t[i] += g[i] * mask[i];
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let t = acc(&mut grads, *a, g.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            t[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let t = acc(&mut grads, *a, g.len());
                    for r in 0..y.rows() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            t[r * cols + c] += gr[c] - y.data[r * cols + c].exp() * gsum;
                        }
                    }
                }
                Op::Nll(x, targets) => {
                    let cols = self.value(*x).cols();
                    let t = acc(&mut grads, *x, len_of(*x));
                    for (r, &k) in targets.iter().enumerate() {
                        t[r * cols + k] -= g[0];
                    }
                }
                Op::Bilinear {
                    head,
                    weight,
                    tail,
                    pairs,
                    projected,
                } => {
                    let (a, w, b) = (self.value(*head), self.value(*weight), self.value(*tail));
                    let (h1, k, h2) = (w.shape[0], w.shape[1], w.shape[2]);
                    let na = a.rows();
                    // d(projected) and d(tail)
                    let mut dproj = vec![0.0; na * k * h2];
                    let mut dtail = vec![0.0; b.len()];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let bj = b.row(j);
                        for c in 0..k {
                            let gpc = g[p * k + c];
                            if gpc == 0.0 {
                                continue;
                            }
                            let base = (i * k + c) * h2;
                            for q in 0..h2 {
                                dproj[base + q] += gpc * bj[q];
                                dtail[j * h2 + q] += gpc * projected[base + q];
                            }
                        }
                    }
                    let mut dhead = vec![0.0; a.len()];
                    gemm(&dproj, (na, k * h2), false, &w.data, (h1, k * h2), true, &mut dhead, 0.0);
                    let mut dw = vec![0.0; w.len()];
                    gemm(&a.data, (na, h1), true, &dproj, (na, k * h2), false, &mut dw, 0.0);
                    for (v, d) in [(*head, dhead), (*weight, dw), (*tail, dtail)] {
                        let t = acc(&mut grads, v, d.len());
                        t.iter_mut().zip(&d).for_each(|(t, d)| *t += d);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients of a backward pass, summed per parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                let slot = out.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        out
    }
}

/// Initializer used when a parameter is created.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their Adam state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Numeric(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Data(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            value,
            grad: None,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Adds a tape's parameter gradients to the stored gradients. Every
    /// parameter ends up with a gradient buffer, zero if it was not used.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        let by_param = tape.param_grads(grads);
        for p in &mut self.params {
            p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        }
        for (id, g) in by_param {
            let buf = self.params[id.0].grad.as_mut().expect("initialized above");
            buf.data.iter_mut().zip(&g).for_each(|(b, g)| *b += g);
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.params[id.0]
            .grad
            .as_ref()
            .map_or(0.0, |g| g.data.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// One Adam update of every parameter; gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Numeric(format!("parameter `{}` has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            for i in 0..g.data.len() {
                let gi = g.data[i];
                let m = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                p.m.data[i] = m;
                p.v.data[i] = v;
                let denom = (v / bc2).sqrt() + cfg.eps;
                p.value.data[i] -= cfg.lr * (m / bc1) / denom;
            }
        }
        Ok(())
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, p) in self.params.iter().enumerate() {
            if p.m.shape() != p.value.shape() || p.v.shape() != p.value.shape() {
                return Err(Error::shape("param store", format!("moment shape of `{}`", p.name)));
            }
            if self.index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate parameter `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// Denominator floor of [`grad_check`]'s relative error, so that coordinates
/// with vanishing gradients are compared by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_error: f64,
    /// `(parameter name, index)` of that coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pooling branch
    /// point, where finite differences do not measure the gradient.
    pub straddled: usize,
}

/// Largest relative error between analytic gradients and central finite
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` over a seeded sample of at least
/// `min_coords` parameter coordinates (every coordinate if there are fewer).
///
/// `f` must be deterministic. The relative error of one coordinate is
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`. A coordinate whose `±ε`
/// evaluations take different branches than the unperturbed one (see
/// [`Tape::branch_signature`]) is not counted and another one is drawn.
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, min_coords: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    grad_check_report(store, epsilon, min_coords, seed, f).map(|r| r.max_error)
}

/// [`grad_check`] with the location of the worst coordinate and counts.
pub fn grad_check_report<F>(
    store: &mut ParamStore,
    epsilon: f64,
    min_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);
    let base_branches = tape.branch_signature();

    let sizes: Vec<usize> = store.params.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &n| {
            let s = *acc;
            *acc += n;
            Some(s)
        })
        .collect();
    let locate = |flat: usize| {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        (p, flat - offsets[p])
    };
    // a few coordinates from every parameter first, then uniform draws
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = Vec::new();
    for (p, &n) in sizes.iter().enumerate() {
        candidates.extend(index::sample(&mut rng, n, n.min(3)).into_iter().map(|i| offsets[p] + i));
    }
    let mut taken = vec![false; total];
    candidates.iter().for_each(|&i| taken[i] = true);
    let mut rest: Vec<usize> = (0..total).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    candidates.extend(rest);

    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let v = f(store, &mut tape)?;
        Ok((tape.value(v).item(), tape.branch_signature()))
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        checked: 0,
        straddled: 0,
    };
    for flat in candidates {
        if report.checked >= min_coords {
            break;
        }
        let (p, i) = locate(flat);
        let id = ParamId(p);
        let original = store.value(id).data[i];
        store.value_mut(id).data[i] = original + epsilon;
        let (plus, plus_branches) = eval(store)?;
        store.value_mut(id).data[i] = original - epsilon;
        let (minus, minus_branches) = eval(store)?;
        store.value_mut(id).data[i] = original;
        if plus_branches != base_branches || minus_branches != base_branches {
            report.straddled += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get(&id).map_or(0.0, |g| g[i]);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        if err > report.max_error || report.worst.is_none() {
            report.max_error = report.max_error.max(err);
            report.worst = Some((store.params[p].name.clone(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn store_with(shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut s = ParamStore::new();
        let mut r = rng();
        for (name, shape) in shapes {
            s.add(name, shape, Init::Normal { std: 0.5 }, &mut r).unwrap();
        }
        s
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-50.0, 0.0, 700.0]]).unwrap());
        let y = t.softmax(x);
        for r in 0..2 {
            let s: f64 = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_of_single_row_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        let y = t.max_pool_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let mut r = rng();
        assert_eq!(t.dropout(x, 0.0, true, &mut r).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, false, &mut r).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut r).is_err());
        let y = t.dropout(x, 0.5, true, &mut r).unwrap();
        for (&o, &i) in t.value(y).data().iter().zip(t.value(x).data()) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        let c = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(t.gather(a, &[2]), Err(Error::Shape { op: "gather", .. })));
        assert!(matches!(t.nll(a, &[0]), Err(Error::Shape { op: "nll", .. })));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut t = Tape::new();
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let x = t.leaf(x0.clone());
        let y = t.relu(x);
        let z = t.scale(y, 3.0);
        let s = t.sum(z);
        t.backward(s).unwrap();
        assert_eq!(t.value(x), &x0);
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = store_with(&[("theta", &[4, 5])]);
        let err = grad_check(&mut store, 1e-5, 100, 1, |s, t| {
            let p = t.param(s, ParamId(0));
            let sq = t.mul(p, p)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
        // analytic gradient is 2θ
        let mut t = Tape::new();
        let p = t.param(&store, ParamId(0));
        let sq = t.mul(p, p).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        for (gv, v) in g.wrt(p).unwrap().iter().zip(store.value(ParamId(0)).data()) {
            assert!((gv - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = store_with(&[("theta", &[3])]);
        let mut t = Tape::new();
        let p = t.param(&store, ParamId(0));
        let z = t.scale(p, 0.0);
        let l = t.sum(z);
        let g = t.backward(l).unwrap();
        store.accumulate(&t, &g);
        assert_eq!(store.grad_norm(ParamId(0)), 0.0);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut store = store_with(&[
            ("x", &[3, 4]),
            ("w", &[4, 5]),
            ("b", &[5]),
            ("emb", &[6, 5]),
            ("bw", &[5, 2, 5]),
            ("y", &[3, 5]),
        ]);
        let err = grad_check(&mut store, 1e-5, 200, 3, |s, t| {
            let x = t.param(s, ParamId(0));
            let w = t.param(s, ParamId(1));
            let b = t.param(s, ParamId(2));
            let emb = t.param(s, ParamId(3));
            let bw = t.param(s, ParamId(4));
            let y = t.param(s, ParamId(5));
            let h = t.matmul(x, w)?;
            let h = t.add_row(h, b)?;
            let h = t.relu(h);
            let e = t.gather(emb, &[1, 4, 1])?;
            let h = t.add(h, e)?;
            let h = t.mul(h, y)?;
            let pooled = t.segment_max(h, &[0..2, 2..3])?;
            let stacked = t.concat_rows(&[h, pooled])?;
            let both = t.concat_cols(&[stacked, stacked])?;
            let bil = t.bilinear(stacked, bw, stacked, &[(0, 1), (4, 2), (3, 3)])?;
            let sm = t.softmax(both);
            let sm = t.scale(sm, 2.0);
            let lsm = t.log_softmax(bil);
            let nll = t.nll(lsm, &[1, 0, 1])?;
            let s1 = t.sum(sm);
            let s1 = t.mul(s1, s1)?;
            let l = t.add(s1, nll)?;
            Ok(l)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut store = store_with(&[("theta", &[3])]);
        let before = store.value(ParamId(0)).clone();
        let t = Tape::new();
        let g = Gradients { grads: vec![] };
        store.accumulate(&t, &g);
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value(ParamId(0)), &before);
        assert_eq!(store.step(), 1);
        assert!(store.adam_step(&AdamConfig::default()).is_err());
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut steps = 0;
        while store.value(ParamId(0)).data()[0].abs() >= 1e-3 && steps < 2000 {
            let mut t = Tape::new();
            let p = t.param(&store, ParamId(0));
            let sq = t.mul(p, p).unwrap();
            let l = t.sum(sq);
            let g = t.backward(l).unwrap();
            store.accumulate(&t, &g);
            store.adam_step(&cfg).unwrap();
            steps += 1;
        }
        assert!(store.value(ParamId(0)).data()[0].abs() < 1e-3, "after {steps} steps");
        assert_eq!(store.step(), steps as u64);
    }

    #[test]
    fn store_serde_is_bit_exact() {
        let mut store = store_with(&[("a", &[2, 3]), ("b", &[4])]);
        let t = Tape::new();
        store.accumulate(&t, &Gradients { grads: vec![] });
        store.adam_step(&AdamConfig::default()).unwrap();
        let json = serde_json::to_string(&store).unwrap();
        let mut back: ParamStore = serde_json::from_str(&json).unwrap();
        back.reindex().unwrap();
        assert_eq!(back, store);
        assert_eq!(back.id("b"), Some(ParamId(1)));
    }

    #[test]
    fn glorot_bounds() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[10, 20], Init::Glorot { fan_in: 10, fan_out: 20 }, &mut rng()).unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= bound));
        let z = s.add("b", &[20], Init::Zeros, &mut rng()).unwrap();
        assert!(s.value(z).data().iter().all(|&v| v == 0.0));
    }
}
