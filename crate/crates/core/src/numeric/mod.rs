//! Dense vector/matrix kernels, probability transforms and divergences.
//!
//! Everything here is a pure function over `f64` data. Results are
//! bit-deterministic for fixed inputs: loops run in a fixed order and no
//! kernel reassociates sums.

mod rng;

pub use rng::{derive_seed, SeededRng};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability entries are clamped to at least this value before the log in
/// [`kl_divergence`].
pub const KL_EPSILON: f64 = 1e-12;

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(Vector(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector must be non-empty");
        Vector(vec![0.0; len])
    }

    /// Wraps values already known to be finite and non-empty.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Vector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix shape {rows}x{cols} must be positive"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::dim(rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidInput("no rows".into()))?;
        let cols = first.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(cols, r.len()));
            }
            values.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, values)
    }

    /// Concatenates matrices with equal column counts top to bottom.
    pub fn vstack(parts: &[Matrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("no matrices to stack".into()))?;
        let mut values = Vec::with_capacity(parts.iter().map(|m| m.values.len()).sum());
        for m in parts {
            if m.cols != first.cols {
                return Err(Error::dim(first.cols, m.cols));
            }
            values.extend_from_slice(&m.values);
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        Ok(Matrix::from_trusted(rows, first.cols, values))
    }

    pub(crate) fn from_trusted(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Matrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// A probability vector: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("probability vector is empty".into()));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax(v: &Vector, temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite softmax input".into()));
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)`, with both entries floored at
/// [`KL_EPSILON`] inside the log.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(p.len(), q.len()));
    }
    let kl: f64 = p
        .0
        .iter()
        .zip(&q.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_EPSILON) / qi.max(KL_EPSILON)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// `m * v`.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::dim(m.cols, v.len()));
    }
    let out = (0..m.rows)
        .map(|i| dot(m.row(i), v.as_slice()))
        .collect();
    Ok(Vector::from_trusted(out))
}

/// `mᵀ * v`.
pub fn matvec_transposed(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.rows != v.len() {
        return Err(Error::dim(m.rows, v.len()));
    }
    let mut out = vec![0.0; m.cols];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += mij * vi;
        }
    }
    Ok(Vector::from_trusted(out))
}

/// `a * b` for an `n×k` and a `k×m` matrix.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(a.cols, b.rows));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let dst = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix::from_trusted(a.rows, b.cols, out))
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    Ok(Vector::from_trusted(
        a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
    ))
}

/// `s * a + b`.
pub fn axpy(s: f64, a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    Ok(Vector::from_trusted(
        a.iter().zip(b.iter()).map(|(x, y)| s * x + y).collect(),
    ))
}

/// `D[i][j] = ||q_i - g_j||²`.
pub fn pairwise_sq_euclidean(queries: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    if queries.cols != gallery.cols {
        return Err(Error::dim(queries.cols, gallery.cols));
    }
    let mut out = Vec::with_capacity(queries.rows * gallery.rows);
    for i in 0..queries.rows {
        let q = queries.row(i);
        for j in 0..gallery.rows {
            out.push(sq_distance(q, gallery.row(j)));
        }
    }
    Ok(Matrix::from_trusted(queries.rows, gallery.rows, out))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}
