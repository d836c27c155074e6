//! Dense linear algebra and selection primitives.
//!
//! Storage is `f32`; every reduction (dot products, means, variances,
//! norms) accumulates in `f64` with a fixed left-to-right order. Each output
//! row of a kernel depends only on the corresponding input row, so computing
//! a gathered subset of rows gives bitwise the same values as computing all
//! rows and gathering afterwards. The cacher relies on this.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::exec::Execution;

/// Row-major `f32` matrix. One frame's token embeddings are a `T x D` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(StcError::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StcError::Argument(format!(
                "non-finite entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(StcError::shape("Matrix::from_rows", "ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; an empty-column matrix has no row data
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// New matrix holding rows `idx` in index order.
    pub fn gather_rows(&self, idx: &IndexSet) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx.iter() {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Overwrites rows `idx` with the rows of `src`, in order.
    pub fn scatter_rows(&mut self, idx: &IndexSet, src: &Matrix) -> Result<()> {
        if src.rows != idx.len() || src.cols != self.cols {
            return Err(StcError::shape(
                "scatter_rows",
                format!(
                    "{}x{} source for {} indices into {}x{}",
                    src.rows,
                    src.cols,
                    idx.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        if let Some(&last) = idx.as_slice().last() {
            if last >= self.rows {
                return Err(StcError::shape(
                    "scatter_rows",
                    format!("index {last} out of {} rows", self.rows),
                ));
            }
        }
        for (r, &i) in idx.iter().enumerate() {
            self.row_mut(i).copy_from_slice(src.row(r));
        }
        Ok(())
    }

    /// Elementwise sum; used for residual connections.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(StcError::shape(
                "add",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn map_in_place(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .fold(0.0, f64::max)
    }
}

/// Strictly ascending set of row positions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Validates ascending order, uniqueness and `index < bound`.
    pub fn new(indices: Vec<usize>, bound: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StcError::Argument(
                "index set must be strictly ascending".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= bound {
                return Err(StcError::Argument(format!(
                    "index {last} out of range 0..{bound}"
                )));
            }
        }
        Ok(IndexSet(indices))
    }

    /// Sorts and validates arbitrary positions.
    pub fn from_unsorted(mut indices: Vec<usize>, bound: usize) -> Result<Self> {
        indices.sort_unstable();
        IndexSet::new(indices, bound)
    }

    pub fn all(n: usize) -> Self {
        IndexSet((0..n).collect())
    }

    pub fn empty() -> Self {
        IndexSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero-norm inputs score 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Execution::default())
}

/// `a · b`, parallel over output rows when the policy allows.
pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Execution) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(StcError::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (inner, n) = (a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, n);
    let exec = exec.for_work(a.rows * inner * n);
    exec.for_each_row(&mut out.data, n, |i, out_row| {
        let mut acc = vec![0.0f64; n];
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = f64::from(a_ip);
            for (slot, &b_pj) in acc.iter_mut().zip(b.row(p)) {
                *slot += a_ip * f64::from(b_pj);
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = v as f32;
        }
    });
    Ok(out)
}

/// Normalizes each row to zero mean and unit variance, then applies
/// `gamma * x + beta`. Mean and variance use a two-pass `f64` reduction.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(StcError::shape(
            "layer_norm",
            format!(
                "gamma {} / beta {} for {} columns",
                gamma.len(),
                beta.len(),
                x.cols
            ),
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(StcError::Argument(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = x.clone();
    let n = x.cols as f64;
    for row in out.data.chunks_exact_mut(x.cols.max(1)) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let d = f64::from(v) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = ((f64::from(*v) - mean) * inv * f64::from(*g) + f64::from(*b)) as f32;
        }
    }
    Ok(out)
}

/// Max-subtracted softmax over a row of logits, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let mut buf = vec![0.0f64; x.cols];
    for row in out.data.chunks_exact_mut(x.cols.max(1)) {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = f64::from(*v);
        }
        softmax_in_place(&mut buf);
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = *b as f32;
        }
    }
    out
}

/// Token similarity measure. Distances are negated so that for every
/// metric a larger value means "more similar".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    L1,
    L2,
    Dot,
}

pub fn row_similarity(a: &[f32], b: &[f32], metric: SimilarityMetric) -> f64 {
    match metric {
        SimilarityMetric::Cosine => cosine_similarity(a, b),
        SimilarityMetric::L1 => -a
            .iter()
            .zip(b)
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
            .sum::<f64>(),
        SimilarityMetric::L2 => -a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let d = f64::from(*x) - f64::from(*y);
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        SimilarityMetric::Dot => dot(a, b),
    }
}

/// One similarity score per row pair.
pub fn rowwise_similarity(a: &Matrix, b: &Matrix, metric: SimilarityMetric) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(StcError::shape(
            "rowwise_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.row_iter()
        .zip(b.row_iter())
        .map(|(x, y)| row_similarity(x, y, metric))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Largest,
    Smallest,
}

// NaN sorts as the least extreme value; -0.0 and 0.0 compare equal.
#[inline]
fn sort_key(s: f64, direction: Direction) -> f64 {
    let s = if s.is_nan() {
        match direction {
            Direction::Largest => f64::NEG_INFINITY,
            Direction::Smallest => f64::INFINITY,
        }
    } else if s == 0.0 {
        0.0
    } else {
        s
    };
    match direction {
        Direction::Largest => -s,
        Direction::Smallest => s,
    }
}

/// Indices of the `k` most extreme scores, ties going to the lower index,
/// returned in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize, direction: Direction) -> Result<IndexSet> {
    if k > scores.len() {
        return Err(StcError::Argument(format!(
            "k = {k} exceeds {} scores",
            scores.len()
        )));
    }
    if k == 0 {
        return Ok(IndexSet::empty());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        sort_key(scores[a], direction)
            .total_cmp(&sort_key(scores[b], direction))
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable();
    Ok(IndexSet(order))
}

/// `⌊n · (1 − ratio)⌋`, with a 1e-9 guard so that products such as
/// `10 · (1 − 0.7)` do not lose an element to binary rounding.
pub fn retained_count(n: usize, ratio: f64) -> usize {
    let kept = (n as f64 * (1.0 - ratio) + 1e-9).floor();
    (kept.max(0.0) as usize).min(n)
}

/// `‖a − b‖_F / ‖b‖_F`; falls back to the absolute error when `b` is zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let mut diff = 0.0f64;
    let mut base = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = f64::from(*x) - f64::from(*y);
        diff += d * d;
        base += f64::from(*y) * f64::from(*y);
    }
    if base == 0.0 {
        diff.sqrt()
    } else {
        (diff / base).sqrt()
    }
}

/// Cosine similarity of two matrices viewed as flat vectors.
pub fn matrix_cosine(a: &Matrix, b: &Matrix) -> f64 {
    cosine_similarity(&a.data, &b.data)
}
