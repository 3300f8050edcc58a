//! Dense matrix type and the decompositions used by the inversion:
//! one-sided Jacobi SVD, cyclic Jacobi symmetric eigendecomposition and
//! Householder QR.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;
    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Builds an `n x columns.len()` matrix from column vectors of length `n`.
    pub fn from_columns(n: usize, columns: &[Vec<f64>]) -> Self {
        let mut m = Self::zeros(n, columns.len());
        for (j, col) in columns.iter().enumerate() {
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                &[self.rows, self.cols, self.cols, other.cols],
                &[self.rows, self.cols, other.rows, other.cols],
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "mul_vec length");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `vᵀ * self`, returned as a plain vector.
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "vec_mul length");
        let mut out = vec![0.0; self.cols];
        for (r, &w) in v.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += w * a;
            }
        }
        out
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps the first `n` columns.
    pub fn take_columns(&self, n: usize) -> Matrix {
        Matrix::from_fn(self.rows, n, |r, c| self[(r, c)])
    }

    /// `self * selfᵀ`, exactly symmetric.
    pub fn gram_rows(&self) -> Matrix {
        let mut g = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

/// Thin singular value decomposition `m = u * diag(s) * vt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    /// `rows x r` left-singular vectors (columns), `r = min(rows, cols)`.
    pub u: Matrix,
    /// Singular values, descending and nonnegative.
    pub s: Vec<f64>,
    /// `r x cols` right-singular vectors (rows).
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

fn sweep_cap(rows: usize, cols: usize) -> usize {
    100 * rows.max(cols).max(1)
}

/// Square `rows x rows` left-singular basis of `m` with one singular value
/// per column, descending; tall inputs are completed with zero values.
pub fn left_singular_full(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let r = svd(m)?;
    let n = m.rows();
    if r.u.cols() == n {
        return Ok((r.u, r.s));
    }
    let extra = orthogonal_complement(&r.u);
    let mut cols = r.u.columns();
    cols.extend(extra.columns());
    let mut s = r.s;
    s.resize(n, 0.0);
    Ok((Matrix::from_columns(n, &cols), s))
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = one_sided_jacobi(m)?;
        Ok(SvdResult { u, s, vt: v.transpose() })
    } else {
        let (u, s, v) = one_sided_jacobi(&m.transpose())?;
        Ok(SvdResult { u: v, s, vt: u.transpose() })
    }
}

/// Returns `(u, s, v)` with `a = u diag(s) vᵀ`; requires `rows >= cols`.
fn one_sided_jacobi(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = a.columns();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m.max(1) as f64);
    // columns at rounding level of the whole matrix count as zero
    let floor = (f64::EPSILON * a.frobenius_norm()).powi(2);
    let cap = sweep_cap(m, n);
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= cap {
            return Err(Error::NoConvergence {
                algorithm: "one-sided Jacobi SVD",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
    }

    let sigma: Vec<f64> = cols
        .iter()
        .map(|c| {
            let s = norm(c);
            if s * s <= floor {
                0.0
            } else {
                s
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &j in &order {
        let sj = sigma[j];
        s_sorted.push(sj);
        v_cols.push(v[j].clone());
        if sj > f64::MIN_POSITIVE * 1e8 {
            u_cols.push(Some(cols[j].iter().map(|x| x / sj).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(m, u_cols);
    Ok((
        Matrix::from_columns(m, &u_cols),
        s_sorted,
        Matrix::from_columns(n, &v_cols),
    ))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// drawn from the canonical basis by two-pass Gram-Schmidt.
fn complete_orthonormal(n: usize, slots: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = slots.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(slots.len());
    let mut next_canonical = 0;
    for slot in slots {
        match slot {
            Some(v) => out.push(v),
            None => loop {
                assert!(next_canonical < n, "cannot complete an orthonormal basis");
                let mut e = vec![0.0; n];
                e[next_canonical] = 1.0;
                next_canonical += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let proj = dot(&e, b);
                        for (x, y) in e.iter_mut().zip(b) {
                            *x -= proj * y;
                        }
                    }
                }
                let len = norm(&e);
                if len > 1e-8 {
                    e.iter_mut().for_each(|x| *x /= len);
                    basis.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second element.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::shape("sym_eig", &[n, n], &[m.rows(), m.cols()]));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let scale = m.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidArgument(format!(
                    "sym_eig input not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::identity(n);
    let cap = sweep_cap(n, n);
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= f64::EPSILON * 0.5 * (app.abs() * aqq.abs()).sqrt()
                    || apq.abs() < f64::MIN_POSITIVE
                {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps >= cap {
            return Err(Error::NoConvergence {
                algorithm: "Jacobi eigendecomposition",
                iterations: sweeps,
            });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Householder QR returning the full `rows x rows` orthogonal factor and the
/// `rows x cols` upper-triangular factor. Diagonal of `R` is made nonnegative.
pub fn householder_qr_full(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    let mut r = m.clone();
    let mut q = Matrix::identity(rows);
    for k in 0..cols.min(rows.saturating_sub(1)) {
        let x: Vec<f64> = (k..rows).map(|i| r[(i, k)]).collect();
        let alpha = norm(&x);
        if alpha == 0.0 {
            continue;
        }
        let mut h = x;
        let sign = if h[0] >= 0.0 { 1.0 } else { -1.0 };
        h[0] += sign * alpha;
        let hn = norm(&h);
        if hn == 0.0 {
            continue;
        }
        h.iter_mut().for_each(|x| *x /= hn);
        for j in 0..cols {
            let d: f64 = (k..rows).map(|i| h[i - k] * r[(i, j)]).sum();
            for i in k..rows {
                r[(i, j)] -= 2.0 * h[i - k] * d;
            }
        }
        for i in k + 1..rows {
            r[(i, k)] = 0.0;
        }
        for i in 0..rows {
            let d: f64 = (k..rows).map(|j| q[(i, j)] * h[j - k]).sum();
            for j in k..rows {
                q[(i, j)] -= 2.0 * d * h[j - k];
            }
        }
    }
    for k in 0..cols.min(rows) {
        if r[(k, k)] < 0.0 {
            for j in 0..cols {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..rows {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    (q, r)
}

/// Thin QR: `Q` is `rows x min(rows, cols)` with orthonormal columns.
pub fn qr(m: &Matrix) -> (Matrix, Matrix) {
    let kmin = m.rows().min(m.cols());
    let (q, r) = householder_qr_full(m);
    let q_thin = q.take_columns(kmin);
    let r_thin = Matrix::from_fn(kmin, m.cols(), |i, j| r[(i, j)]);
    (q_thin, r_thin)
}

/// Orthonormal basis of the orthogonal complement of the column span of
/// `basis` (assumed orthonormal, `n x d`), obtained by QR completion.
pub fn orthogonal_complement(basis: &Matrix) -> Matrix {
    let (n, d) = (basis.rows(), basis.cols());
    if d == 0 {
        return Matrix::identity(n);
    }
    let (q, _) = householder_qr_full(basis);
    Matrix::from_fn(n, n - d.min(n), |r, c| q[(r, c + d)])
}

/// Maximum deviation of `mᵀm` from the identity.
pub fn orthonormality_residual(m: &Matrix) -> f64 {
    let g = m.transpose().matmul(m).expect("conformant");
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}
