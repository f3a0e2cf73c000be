//! Compressed sparse row storage, products, an SPD solver and CGLS.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};

/// Compressed sparse row matrix in double precision.
///
/// Column indices are sorted and unique within each row and no explicit
/// zeros are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({i}, {j}) outside {rows}x{cols} matrix"
                )));
            }
            per_row[i].push((j, v));
        }
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_offsets.push(0);
        for mut entries in per_row {
            // stable sort keeps duplicate summation order deterministic
            entries.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < entries.len() {
                let col = entries[k].0;
                let mut sum = 0.0;
                while k < entries.len() && entries[k].0 == col {
                    sum += entries[k].1;
                    k += 1;
                }
                if sum != 0.0 {
                    col_indices.push(col);
                    values.push(sum);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds a matrix from a row-major dense array, dropping zeros.
    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        check_dim("dense matrix data", rows * cols, data.len())?;
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for i in 0..rows {
            for j in 0..cols {
                let v = data[i * cols + j];
                if v != 0.0 {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(col, value)` over the stored entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Stored value at `(i, j)`, zero if absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        match self.col_indices[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// `out = A v`.
    pub fn spmv_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("spmv input", self.cols, v.len())?;
        check_dim("spmv output", self.rows, out.len())?;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                acc += self.values[k] * v[self.col_indices[k]];
            }
            *o = acc;
        }
        Ok(())
    }

    pub fn spmv(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows];
        self.spmv_into(v, &mut out)?;
        Ok(out)
    }

    /// `Aᵀ w` by scattering rows; see [`CsrMatrix::transpose`] for a
    /// gather-ordered alternative.
    pub fn spmv_transpose(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("spmv_transpose input", self.rows, w.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &wi) in w.iter().enumerate() {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                out[self.col_indices[k]] += self.values[k] * wi;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &j in &self.col_indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.cols {
            counts[j + 1] += counts[j];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.rows {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                let dst = next[j];
                col_indices[dst] = i;
                values[dst] = self.values[k];
                next[j] += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                d[i * self.cols + j] = v;
            }
        }
        d
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Extracts the sub-matrix `A[rows, cols]`; `cols` must be sorted.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.cols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for &i in rows {
            for (j, v) in self.row(i) {
                let nj = col_map[j];
                if nj != usize::MAX {
                    col_indices.push(nj);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        let mut out = Self {
            rows: rows.len(),
            cols: cols.len(),
            row_offsets,
            col_indices,
            values,
        };
        out.sort_rows();
        out
    }

    fn sort_rows(&mut self) {
        for i in 0..self.rows {
            let range = self.row_offsets[i]..self.row_offsets[i + 1];
            let mut entries: Vec<(usize, f64)> = self.col_indices[range.clone()]
                .iter()
                .copied()
                .zip(self.values[range.clone()].iter().copied())
                .collect();
            entries.sort_by_key(|e| e.0);
            for (k, (j, v)) in range.zip(entries) {
                self.col_indices[k] = j;
                self.values[k] = v;
            }
        }
    }

    /// Largest absolute asymmetry `max |A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Linear map with an adjoint.
pub trait LinearOperator {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>>;
}

impl LinearOperator for CsrMatrix {
    fn in_dim(&self) -> usize {
        self.cols
    }
    fn out_dim(&self) -> usize {
        self.rows
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.spmv(v)
    }
    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.spmv_transpose(w)
    }
}

/// A sparse matrix together with its explicitly stored transpose, so both
/// directions are row-gather products with a fixed summation order.
#[derive(Clone, Debug)]
pub struct MatrixOperator {
    forward: Arc<CsrMatrix>,
    adjoint: Arc<CsrMatrix>,
}

impl MatrixOperator {
    pub fn new(matrix: CsrMatrix) -> Self {
        let adjoint = matrix.transpose();
        Self {
            forward: Arc::new(matrix),
            adjoint: Arc::new(adjoint),
        }
    }

    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.forward
    }

    pub fn adjoint_matrix(&self) -> &Arc<CsrMatrix> {
        &self.adjoint
    }

    /// The transposed operator, sharing storage.
    pub fn adjoint(&self) -> MatrixOperator {
        Self {
            forward: Arc::clone(&self.adjoint),
            adjoint: Arc::clone(&self.forward),
        }
    }
}

impl LinearOperator for MatrixOperator {
    fn in_dim(&self) -> usize {
        self.forward.cols()
    }
    fn out_dim(&self) -> usize {
        self.forward.rows()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.forward.spmv(v)
    }
    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.adjoint.spmv(w)
    }
}

/// Sequential dot product; the summation order is fixed so that recorded and
/// plain solver paths agree bit-for-bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves an SPD system with Jacobi-preconditioned conjugate gradients.
///
/// Stops when `‖Ax − b‖ ≤ tol·‖b‖`; fails after `10·dim` iterations.
pub fn solve_spd(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_dim("solve_spd rows", a.rows(), a.cols())?;
    check_dim("solve_spd rhs", a.rows(), b.len())?;
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iter = 10 * n.max(1);
    for _ in 0..max_iter {
        a.spmv_into(&p, &mut ap)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Singular(format!(
                "non-positive curvature pᵀAp = {pap:.3e} in SPD solve"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= tol * b_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: norm(&r) / b_norm,
    })
}

/// Outcome of a CGLS run.
#[derive(Clone, Debug)]
pub struct CglsResult {
    pub x: Vec<f64>,
    /// Set when `‖A p‖² = 0` stopped the iteration early.
    pub breakdown: bool,
    pub iterations: usize,
    /// `‖y − A x_k‖` for `k = 0..=iterations`.
    pub residual_norms: Vec<f64>,
}

/// CGLS stops once `‖Aᵀ r‖²` falls this far below its starting value. Past
/// that point the iterates carry only rounding noise and `γ/δ` can take an
/// O(1) step in a meaningless direction.
pub(crate) const CGLS_CONVERGED: f64 = 1e-28;

/// Conjugate gradient least squares for `min ‖A x − y‖²`, warm-started at
/// `x0`, running `iters` iterations unless it converges to rounding level
/// first or breaks down.
pub fn cgls<A: LinearOperator + ?Sized>(
    op: &A,
    y: &[f64],
    x0: &[f64],
    iters: usize,
) -> Result<CglsResult> {
    check_dim("cgls observation", op.out_dim(), y.len())?;
    check_dim("cgls initial guess", op.in_dim(), x0.len())?;
    if iters == 0 {
        return Err(Error::InvalidArgument("cgls needs at least one iteration".into()));
    }
    let mut x = x0.to_vec();
    let ax = op.apply(&x)?;
    let mut r: Vec<f64> = y.iter().zip(&ax).map(|(y, a)| y - a).collect();
    let mut s = op.apply_adjoint(&r)?;
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let stop = gamma * CGLS_CONVERGED;
    let mut residual_norms = vec![norm(&r)];
    let mut breakdown = false;
    let mut done = 0;
    for _ in 0..iters {
        if gamma <= stop {
            break;
        }
        let q = op.apply(&p)?;
        let delta = dot(&q, &q);
        if delta <= 0.0 || !delta.is_finite() {
            breakdown = true;
            break;
        }
        let alpha = gamma / delta;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = op.apply_adjoint(&r)?;
        let gamma_new = dot(&s, &s);
        let beta = gamma_new / gamma;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
        gamma = gamma_new;
        done += 1;
        residual_norms.push(norm(&r));
    }
    Ok(CglsResult {
        x,
        breakdown,
        iterations: done,
        residual_norms,
    })
}
