//! Dense linear algebra over `f64`: a row-major [`Matrix`], slice helpers for
//! vectors, modified Gram-Schmidt bases, orthogonal projection and a one-sided
//! Jacobi SVD.
//!
//! Parameter vectors are plain `Vec<f64>` / `&[f64]`; everything here is
//! deterministic for fixed input.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from;

/// Maximum number of Jacobi sweeps before the SVD reports non-convergence.
pub const SVD_MAX_SWEEPS: usize = 60;
/// Relative off-diagonal tolerance for the Jacobi rotations.
pub const SVD_TOL: f64 = 1e-12;
/// `sigma_j` counts toward numerical rank iff `sigma_j > RANK_RTOL * sigma_1`.
pub const RANK_RTOL: f64 = 1e-8;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(alpha: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| alpha * x).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Row-major dense matrix. Zero-column matrices are allowed and represent an
/// empty basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::invalid("matrix has non-finite entries"));
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
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_dim(c, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// Builds a `dim x columns.len()` matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let mut m = Self::zeros(dim, cols);
        for (j, col) in columns.iter().enumerate() {
            check_dim(dim, col.len())?;
            if !all_finite(col) {
                return Err(Error::invalid(format!("column {j} has non-finite entries")));
            }
            for (i, v) in col.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        Ok(m)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `self * v`
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..k]);
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Orthonormalises `v` against `basis` with two passes of modified
/// Gram-Schmidt and returns the residual (not normalised).
fn residual_against(basis: &[Vec<f64>], mut v: Vec<f64>) -> Vec<f64> {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, &v);
            axpy(-c, q, &mut v);
        }
    }
    v
}

/// Column-orthonormal basis of the column space of `columns`.
///
/// A column is dropped when its residual after projecting out the basis built
/// so far has norm `<= tol * max_column_norm`. An all-zero input yields a
/// matrix with zero columns.
pub fn orthonormal_basis(columns: &Matrix, tol: f64) -> Result<Matrix> {
    if !(tol > 0.0) {
        return Err(Error::invalid("orthonormal_basis tolerance must be positive"));
    }
    if !columns.is_finite() {
        return Err(Error::invalid("orthonormal_basis input has non-finite entries"));
    }
    let cols = columns.columns();
    let basis = orthonormalize(&cols, tol);
    Matrix::from_columns(columns.rows(), &basis)
}

pub(crate) fn orthonormalize(cols: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let max_norm = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if max_norm == 0.0 {
        return basis;
    }
    for col in cols {
        let r = residual_against(&basis, col.clone());
        let rn = norm(&r);
        if rn > tol * max_norm {
            basis.push(scale(1.0 / rn, &r));
        }
    }
    basis
}

/// Orthogonal projection `B B^T v` onto the span of the orthonormal columns
/// of `span_basis`.
pub fn project_onto(span_basis: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    check_dim(span_basis.rows(), v.len())?;
    let coeffs = span_basis.tr_mul_vec(v)?;
    span_basis.mul_vec(&coeffs)
}

/// Thin SVD `A = U diag(sigma) V^T` with `k = min(rows, cols)` triples.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    /// `rows x k`, orthonormal columns.
    pub left_basis: Matrix,
    /// `cols x k`, orthonormal columns.
    pub right_basis: Matrix,
}

impl SvdResult {
    /// Number of singular values above `RANK_RTOL * sigma_1`.
    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.singular_values)
    }

    /// Rebuilds `U_r diag(sigma_r) V_r^T` from the top `r` triples.
    pub fn truncated(&self, r: usize) -> Matrix {
        let m = self.left_basis.rows();
        let n = self.right_basis.rows();
        let r = r.min(self.singular_values.len());
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let s = self.singular_values[k];
            for i in 0..m {
                let u = self.left_basis[(i, k)] * s;
                if u == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += u * self.right_basis[(j, k)];
                }
            }
        }
        out
    }
}

pub fn numerical_rank(singular_values: &[f64]) -> usize {
    let Some(&top) = singular_values.first() else {
        return 0;
    };
    if top <= 0.0 {
        return 0;
    }
    singular_values
        .iter()
        .filter(|&&s| s > RANK_RTOL * top)
        .count()
}

/// One-sided Jacobi SVD.
///
/// Columns are rotated pairwise until every pair satisfies
/// `|<a_i, a_j>| <= SVD_TOL * |a_i| |a_j|`, with pairs below
/// `(SVD_TOL * |A|_F)^2` treated as already orthogonal. Fails with
/// [`Error::Numerical`] after [`SVD_MAX_SWEEPS`] sweeps.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            singular_values: t.singular_values,
            left_basis: t.right_basis,
            right_basis: t.left_basis,
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut work = a.columns();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro = a.frobenius_norm();
    let floor = (SVD_TOL * fro) * (SVD_TOL * fro);
    let mut converged = fro == 0.0 || n < 2;
    let mut sweep = 0;
    while !converged {
        if sweep == SVD_MAX_SWEEPS {
            return Err(Error::numerical(format!(
                "jacobi svd did not converge in {SVD_MAX_SWEEPS} sweeps"
            )));
        }
        sweep += 1;
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = norm_sq(&work[i]);
                let beta = norm_sq(&work[j]);
                let gamma = dot(&work[i], &work[j]);
                if gamma.abs() <= floor || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }

    let mut sigma: Vec<(usize, f64)> = work.iter().map(|c| norm(c)).enumerate().collect();
    // stable: equal values keep column order
    sigma.sort_by(|x, y| y.1.total_cmp(&x.1));

    let top = sigma.first().map_or(0.0, |s| s.1);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut fill = 0usize;
    for &(j, s) in &sigma {
        let candidate = if s > 0.0 && s > f64::EPSILON * top {
            scale(1.0 / s, &work[j])
        } else {
            vec![0.0; m]
        };
        let mut r = residual_against(&u_cols, candidate);
        let mut rn = norm(&r);
        // Null directions: complete the basis from the standard basis, then
        // from fixed-seed Gaussian vectors once those are used up.
        while rn < 0.5 && fill < m {
            let mut e = vec![0.0; m];
            e[fill] = 1.0;
            fill += 1;
            r = residual_against(&u_cols, e);
            rn = norm(&r);
        }
        let mut draws = rng_from(u_cols.len() as u64);
        while rn < 1e-6 {
            let g: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut draws)).collect();
            let g = scale(1.0 / norm(&g), &g);
            r = residual_against(&u_cols, residual_against(&u_cols, g));
            rn = norm(&r);
        }
        u_cols.push(scale(1.0 / rn, &r));
        v_cols.push(v[j].clone());
    }

    Ok(SvdResult {
        singular_values: sigma.iter().map(|s| s.1).collect(),
        left_basis: Matrix::from_columns(m, &u_cols)?,
        right_basis: Matrix::from_columns(n, &v_cols)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}
