//! Dense kernels and the simplex primitives shared by every other module.
//!
//! Storage is row-major `f64`. Batches use one row per sample. All divergences
//! are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SidError};

/// Smallest probability a [`Belief`] may hold after construction.
pub const PROB_FLOOR: f64 = 1e-12;

/// Allowed deviation of a belief's mass from 1.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SidError::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SidError::input(format!(
                "non-finite matrix entry at flat index {pos}"
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SidError::dim("ragged rows"));
        }
        Mat::from_vec(rows.len(), cols, rows.concat())
    }

    /// Repeats `row` `n` times.
    pub fn broadcast_row(row: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(row.len() * n);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Mat {
            rows: n,
            cols: row.len(),
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `[self | other]`, column-wise concatenation.
    pub fn hcat(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(SidError::dim(format!(
                "cannot concatenate {} rows with {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Mat {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn col_range(&self, start: usize, end: usize) -> Mat {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Mat {
            rows: self.rows,
            cols,
            data,
        }
    }

    /// `self * rhs^T`; with `rhs` stored as (out x in) this is a linear layer.
    pub fn matmul_t(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.cols {
            return Err(SidError::dim(format!(
                "matmul_t: lhs has {} columns, rhs has {}",
                self.cols, rhs.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(SidError::dim(format!(
                "matmul: lhs has {} columns, rhs has {} rows",
                self.cols, rhs.rows
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs`, accumulated over rows (batch reduction for weight gradients).
    pub fn t_matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.rows != rhs.rows {
            return Err(SidError::dim(format!(
                "t_matmul: lhs has {} rows, rhs has {}",
                self.rows, rhs.rows
            )));
        }
        let mut out = Mat::zeros(self.cols, rhs.cols);
        for b in 0..self.rows {
            let a = self.row(b);
            let r = rhs.row(b);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (oj, &rj) in o.iter_mut().zip(r) {
                    *oj += ai * rj;
                }
            }
        }
        Ok(out)
    }

    /// Adds `bias` to every row.
    pub fn add_row(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Mat {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bytes occupied by the matrix payload.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// A point in the interior of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    /// Validates caller-supplied probabilities. Zero entries are rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(SidError::input("a belief needs at least two classes"));
        }
        if let Some(k) = probs.iter().position(|p| !p.is_finite() || *p <= 0.0) {
            return Err(SidError::input(format!(
                "belief entry {k} = {} is not strictly positive",
                probs[k]
            )));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(SidError::input(format!("belief mass {mass} is not 1")));
        }
        let mut probs = probs;
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            probs.iter_mut().for_each(|p| *p /= mass);
        }
        Ok(Belief { probs })
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(SidError::input("a belief needs at least two classes"));
        }
        Ok(Belief {
            probs: vec![1.0 / m as f64; m],
        })
    }

    /// Normalizes unnormalized log-weights (log-sum-exp), then floors at
    /// [`PROB_FLOOR`] and renormalizes.
    pub fn from_log_weights(logw: &[f64]) -> Result<Self> {
        if logw.len() < 2 {
            return Err(SidError::input("a belief needs at least two classes"));
        }
        if let Some(k) = logw.iter().position(|v| !v.is_finite()) {
            return Err(SidError::input(format!("non-finite log-weight at {k}")));
        }
        let mut probs = vec![0.0; logw.len()];
        normalize_log_row(logw, &mut probs);
        Ok(Belief { probs })
    }

    /// Wraps a row that is already known to satisfy the invariants.
    pub(crate) fn from_row_unchecked(row: &[f64]) -> Self {
        Belief {
            probs: row.to_vec(),
        }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn ln(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Writes `softmax(logw)` into `out` with the probability floor applied.
pub(crate) fn normalize_log_row(logw: &[f64], out: &mut [f64]) {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logw) {
        *o = (l - max).exp();
        total += *o;
    }
    let mut floored = false;
    for o in out.iter_mut() {
        *o /= total;
        if *o < PROB_FLOOR {
            *o = PROB_FLOOR;
            floored = true;
        }
    }
    if floored {
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// Softmax with max-subtraction; the result always satisfies the belief invariants.
pub fn softmax(logits: &[f64]) -> Result<Belief> {
    Belief::from_log_weights(logits)
}

/// Row-wise softmax over a batch of logits.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        normalize_log_row(logits.row(i), out.row_mut(i));
    }
    out
}

/// Row-wise `log softmax`, computed as `z - logsumexp(z)`.
pub fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// `KL(p || q) = sum_k p(k) ln(p(k)/q(k))`, in nats.
pub fn kl_div(p: &Belief, q: &Belief) -> Result<f64> {
    if p.len() != q.len() {
        return Err(SidError::dim(format!(
            "kl_div over {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_slices(p.probs(), q.probs()))
}

#[inline]
pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pk, &qk)| pk * (pk.ln() - qk.ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Label-smoothed one-hot target. `eps` must be positive so that the target
/// has full support.
pub fn smooth_onehot(label: usize, m: usize, eps: f64) -> Result<Belief> {
    if m < 2 {
        return Err(SidError::input("need at least two classes"));
    }
    if label >= m {
        return Err(SidError::input(format!(
            "label {label} out of range for {m} classes"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(SidError::input(format!("smoothing {eps} not in [0, 1)")));
    }
    let off = eps / m as f64;
    let mut probs = vec![off; m];
    probs[label] = (1.0 - eps) + off;
    Belief::new(probs)
}

/// Batch of smoothed targets, one row per label.
pub fn smooth_onehot_rows(labels: &[usize], m: usize, eps: f64) -> Result<Mat> {
    let mut out = Mat::zeros(labels.len(), m);
    for (i, &y) in labels.iter().enumerate() {
        out.row_mut(i)
            .copy_from_slice(smooth_onehot(y, m, eps)?.probs());
    }
    Ok(out)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_class(b: &Belief) -> usize {
    argmax(b.probs())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}
