//! Small dense linear algebra: packed symmetric matrices, Cholesky,
//! quadratic forms, correlation normalisation and least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

/// Symmetric matrix stored as its packed lower triangle (row-major).
/// Symmetry holds exactly by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be positive");
        SymMatrix {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Build from `f(i, j)` evaluated on the lower triangle `j <= i`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                m.data[packed_index(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Build from dense rows; the input must be exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim(n, row.len()));
            }
            for j in 0..i {
                if row[j] != rows[j][i] {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self::from_fn(n, |i, j| rows[i][j]))
    }

    /// Matrix with unit diagonal and constant off-diagonal `rho`.
    pub fn equicorrelation(dim: usize, rho: f64) -> Self {
        Self::from_fn(dim, |i, j| if i == j { 1.0 } else { rho })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[packed_index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[packed_index(i, j)] = v;
    }

    /// Packed lower-triangle storage.
    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// `D M D` for a diagonal `D = diag(d)`.
    pub fn scale_diag(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.dim {
            return Err(Error::dim(self.dim, d.len()));
        }
        Ok(Self::from_fn(self.dim, |i, j| d[i] * self.get(i, j) * d[j]))
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Lower-triangular factor `L` in packed row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[packed_index(i, j)]
        }
    }

    /// `L x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            let row = &self.data[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            *o = row.iter().zip(x).map(|(l, v)| l * v).sum();
        }
    }

    /// `L L'`.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_fn(self.dim, |i, j| {
            (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum()
        })
    }

    /// Solve `L x = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for i in 0..self.dim {
            let s: f64 = (0..i).map(|k| self.get(i, k) * x[k]).sum();
            x[i] = (b[i] - s) / self.get(i, i);
        }
        x
    }

    /// Solve `L' x = b` by back substitution.
    pub fn solve_upper_transposed(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for i in (0..self.dim).rev() {
            let s: f64 = (i + 1..self.dim).map(|k| self.get(k, i) * x[k]).sum();
            x[i] = (b[i] - s) / self.get(i, i);
        }
        x
    }
}

/// Cholesky factorisation `M = L L'`. Returns `None` when `M` is not
/// positive definite, i.e. some pivot falls to `1e-12 * max_i M[i,i]` or below.
pub fn cholesky(m: &SymMatrix) -> Option<LowerTriangular> {
    let n = m.dim();
    let max_diag = (0..n).map(|i| m.get(i, i)).fold(0.0_f64, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return None;
    }
    let tol = 1e-12 * max_diag;
    let mut l = vec![0.0; n * (n + 1) / 2];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[packed_index(i, k)] * l[packed_index(j, k)];
            }
            if i == j {
                if !(s > tol) {
                    return None;
                }
                l[packed_index(i, i)] = s.sqrt();
            } else {
                l[packed_index(i, j)] = s / l[packed_index(j, j)];
            }
        }
    }
    Some(LowerTriangular { dim: n, data: l })
}

/// `w' M w`.
pub fn quad_form(m: &SymMatrix, w: &[f64]) -> Result<f64> {
    if w.len() != m.dim() {
        return Err(Error::dim(m.dim(), w.len()));
    }
    Ok(packed_quad_form(m.packed(), w))
}

/// Quadratic form on packed lower-triangular storage.
#[inline]
pub(crate) fn packed_quad_form(packed: &[f64], w: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..w.len() {
        let wi = w[i];
        let mut row = 0.0;
        for wj in &w[..i] {
            row += packed[k] * wj;
            k += 1;
        }
        acc += wi * (2.0 * row + packed[k] * wi);
        k += 1;
    }
    acc
}

/// Normalise to unit diagonal: `out[i,j] = m[i,j] / sqrt(m[i,i] m[j,j])`.
pub fn to_correlation(m: &SymMatrix) -> Result<SymMatrix> {
    let n = m.dim();
    let inv_sd: Vec<f64> = (0..n)
        .map(|i| {
            let d = m.get(i, i);
            if d > 0.0 && d.is_finite() {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::Domain(format!("diagonal entry {i} is {d}")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(SymMatrix::from_fn(n, |i, j| {
        if i == j {
            1.0
        } else {
            (m.get(i, j) * inv_sd[i] * inv_sd[j]).clamp(-1.0, 1.0)
        }
    }))
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy of rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// `X' X` as a symmetric matrix.
    pub fn gram(&self) -> SymMatrix {
        let mut g = SymMatrix::zeros(self.cols.max(1));
        for r in 0..self.rows {
            let row = self.row(r);
            let mut k = 0;
            let packed = g.packed_mut();
            for i in 0..self.cols {
                for j in 0..=i {
                    packed[k] += row[i] * row[j];
                    k += 1;
                }
            }
        }
        g
    }

    /// `X' y`.
    pub fn t_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate().take(self.rows) {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x * yr;
            }
        }
        out
    }

    /// `X b`.
    pub fn mul_vec(&self, b: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(b).map(|(x, v)| x * v).sum())
            .collect()
    }
}

/// Least squares `argmin |y - X b|^2` via Cholesky of the normal equations.
pub fn ols_solve(x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != x.rows() {
        return Err(Error::dim(x.rows(), y.len()));
    }
    if x.cols() == 0 || x.rows() < x.cols() {
        return Err(Error::Rank(format!(
            "{} observations for {} regressors",
            x.rows(),
            x.cols()
        )));
    }
    let l = cholesky(&x.gram())
        .ok_or_else(|| Error::Rank("regressor cross-product matrix is singular".into()))?;
    let z = l.solve_lower(&x.t_mul_vec(y));
    Ok(l.solve_upper_transposed(&z))
}
