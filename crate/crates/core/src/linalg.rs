//! Dense real linear algebra: the matrix container, products, norms and a
//! one-sided Jacobi SVD with rank-k truncation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LqerError, Result};

/// Row-major double precision matrix with at least one row and one column.
///
/// Constructors reject non-finite entries, so every `DenseMatrix` in
/// circulation is finite.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LqerError::argument(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LqerError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LqerError::argument(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LqerError::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// # Panics
    /// Panics if a dimension is zero or `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite entry at ({i}, {j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "subtract", |a, b| a - b)
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        self.map(|v| v * factor)
    }

    /// Applies `f` entry-wise.
    ///
    /// # Panics
    /// Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(
            data.iter().all(|v| v.is_finite()),
            "map produced a non-finite entry"
        );
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> Result<DenseMatrix> {
        if start >= end || end > self.rows {
            return Err(LqerError::argument(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows
            )));
        }
        DenseMatrix::new(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Copies the leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> Result<DenseMatrix> {
        if k == 0 || k > self.cols {
            return Err(LqerError::argument(format!(
                "cannot take {k} leading columns of a {}-column matrix",
                self.cols
            )));
        }
        Ok(DenseMatrix::from_fn(self.rows, k, |i, j| self.get(i, j)))
    }

    fn zip_with(
        &self,
        other: &DenseMatrix,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(LqerError::shape(format!(
                "cannot {what} {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        DenseMatrix::new(self.rows, self.cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LqerError::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, inner, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..inner {
            let aip = a.data[i * inner + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    DenseMatrix::new(m, n, out)
        .map_err(|_| LqerError::Degenerate("matrix product overflowed".into()))
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    // Scaled accumulation keeps huge or tiny entries from over/underflowing.
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    let sum: f64 = m.data.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * sum.sqrt()
}

/// Full singular value decomposition `M = U diag(sigma) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m×m orthogonal.
    pub u: DenseMatrix,
    /// Non-negative, non-increasing, length min(m, n).
    pub sigma: Vec<f64>,
    /// n×n orthogonal.
    pub v: DenseMatrix,
}

/// Leading `k` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    pub u_k: DenseMatrix,
    pub sigma_k: Vec<f64>,
    pub v_k: DenseMatrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.sigma_k.len()
    }

    /// `U_k diag(sigma_k) V_kᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let us = scale_columns(&self.u_k, &self.sigma_k);
        matmul(&us, &self.v_k.transpose()).expect("truncated factors are conformable")
    }
}

/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of cyclic sweeps before giving up.
pub const MAX_SWEEPS: usize = 60;

/// One-sided (Hestenes) Jacobi SVD with cyclic sweeps.
///
/// Wide matrices are handled through their transpose. The left singular
/// vectors are sign-normalised so that the largest-magnitude entry of each is
/// positive.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        let mut res = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        normalize_signs(&mut res);
        Ok(res)
    }
}

fn svd_tall(m: &DenseMatrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    // Column-major working copies: cols[j] is column j.
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = cols < 2;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(LqerError::NoConvergence { sweeps: sweep });
        }
        sweep += 1;
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut work, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = work.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // Stable sort keeps ties in column order, so the result is deterministic.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma[0];
    let null_threshold = sigma_max * (rows.max(cols) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for (&j, &s) in order.iter().zip(&sigma) {
        if s > null_threshold && s > 0.0 {
            u_cols.push(work[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(complete_basis_vector(&u_cols, rows));
        }
    }
    while u_cols.len() < rows {
        let next = complete_basis_vector(&u_cols, rows);
        u_cols.push(next);
    }

    let u = DenseMatrix::from_fn(rows, rows, |i, j| u_cols[j][i]);
    let v = DenseMatrix::from_fn(cols, cols, |i, j| v[order[j]][i]);
    let mut res = SvdResult { u, sigma, v };
    normalize_signs(&mut res);
    Ok(res)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns a unit vector orthogonal to every vector in `basis`, drawn from the
/// standard basis by twice-repeated Gram-Schmidt.
fn complete_basis_vector(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 0.5 {
            return cand.into_iter().map(|c| c / norm).collect();
        }
        if norm > best_norm {
            best_norm = norm;
            best = Some(cand);
        }
    }
    let cand = best.expect("basis is not yet complete");
    cand.into_iter().map(|c| c / best_norm).collect()
}

fn normalize_signs(res: &mut SvdResult) {
    let m = res.u.rows;
    let n = res.v.rows;
    for j in 0..m {
        let mut pivot = 0.0f64;
        for i in 0..m {
            let x = res.u.get(i, j);
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            for i in 0..m {
                res.u.data[i * m + j] = -res.u.data[i * m + j];
            }
            if j < res.sigma.len() {
                for i in 0..n {
                    res.v.data[i * n + j] = -res.v.data[i * n + j];
                }
            }
        }
    }
}

/// Keeps the leading `k` singular triplets.
pub fn truncate(s: &SvdResult, k: usize) -> Result<TruncatedSvd> {
    let max_k = s.sigma.len();
    if k == 0 || k > max_k {
        return Err(LqerError::argument(format!("rank {k} outside 1..={max_k}")));
    }
    Ok(TruncatedSvd {
        u_k: s.u.leading_columns(k)?,
        sigma_k: s.sigma[..k].to_vec(),
        v_k: s.v.leading_columns(k)?,
    })
}

/// Multiplies column j of `m` by `factors[j]`.
pub fn scale_columns(m: &DenseMatrix, factors: &[f64]) -> DenseMatrix {
    assert_eq!(m.cols, factors.len());
    DenseMatrix::from_fn(m.rows, m.cols, |i, j| m.get(i, j) * factors[j])
}

/// Multiplies row i of `m` by `factors[i]`.
pub fn scale_rows(m: &DenseMatrix, factors: &[f64]) -> DenseMatrix {
    assert_eq!(m.rows, factors.len());
    DenseMatrix::from_fn(m.rows, m.cols, |i, j| m.get(i, j) * factors[i])
}
