//! Dense row-major matrices and a rank-revealing least-squares solver.
//!
//! [`lstsq`] factors the design matrix with Householder QR and column
//! pivoting, truncates at the numerical rank, then removes the null-space
//! component with a second QR of the trapezoidal factor (a complete
//! orthogonal decomposition). The result is the minimum-norm least-squares
//! solution, which is what the surrogate fits rely on: spending shares sum to
//! one, so a design with an intercept column is always rank-deficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| crate::scalar::dot(self.row(r), v))
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Minimum-norm least-squares solution of `A x ≈ B`.
#[derive(Debug, Clone)]
pub struct LeastSquares<T> {
    /// `A.cols() × B.cols()`.
    pub solution: Matrix<T>,
    pub rank: usize,
}

/// Solves `min ‖x‖` over the minimisers of `‖A x − B‖₂` for every column of `B`.
pub fn lstsq<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<LeastSquares<T>> {
    let (m, n) = (a.rows(), a.cols());
    let p = b.cols();
    if b.rows() != m {
        return Err(Error::Dimension(format!(
            "design has {m} rows but targets have {}",
            b.rows()
        )));
    }
    if m == 0 {
        return Err(Error::EmptyDataset("least squares with zero rows".into()));
    }
    if n == 0 {
        return Ok(LeastSquares {
            solution: Matrix::zeros(0, p),
            rank: 0,
        });
    }

    // Column-major working copies.
    let mut acol: Vec<T> = (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).map(|(i, j)| a.get(i, j)).collect();
    let mut bcol: Vec<T> = (0..p).flat_map(|j| (0..m).map(move |i| (i, j))).map(|(i, j)| b.get(i, j)).collect();
    let mut perm: Vec<usize> = (0..n).collect();

    let col_norm = |col: &[T]| col.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    let mut norms: Vec<T> = (0..n).map(|j| col_norm(&acol[j * m..(j + 1) * m])).collect();
    let mut norms_ref = norms.clone();

    let eps = T::epsilon();
    let tol = eps * T::of_usize(m.max(n));
    let steps = m.min(n);
    let mut rank = 0;
    let mut r00 = T::zero();
    let mut v = vec![T::zero(); m];

    for k in 0..steps {
        let pivot = (k..n)
            .max_by(|&x, &y| norms[x].partial_cmp(&norms[y]).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(k);
        if pivot != k {
            swap_columns(&mut acol, m, k, pivot);
            perm.swap(k, pivot);
            norms.swap(k, pivot);
            norms_ref.swap(k, pivot);
        }

        let x = &acol[k * m + k..(k + 1) * m];
        let xnorm = col_norm(x);
        if k == 0 {
            r00 = xnorm;
        }
        if xnorm == T::zero() || xnorm <= tol * r00 {
            break;
        }
        let alpha = if x[0] >= T::zero() { -xnorm } else { xnorm };
        let len = m - k;
        v[..len].copy_from_slice(x);
        v[0] -= alpha;
        let vnorm2 = v[..len].iter().fold(T::zero(), |s, &t| s + t * t);
        let scale = T::of(2.0) / vnorm2;

        acol[k * m + k] = alpha;
        for t in acol[k * m + k + 1..(k + 1) * m].iter_mut() {
            *t = T::zero();
        }
        for j in k + 1..n {
            reflect(&mut acol[j * m + k..(j + 1) * m], &v[..len], scale);
        }
        for j in 0..p {
            reflect(&mut bcol[j * m + k..(j + 1) * m], &v[..len], scale);
        }
        rank = k + 1;

        for j in k + 1..n {
            if norms[j] == T::zero() {
                continue;
            }
            let rkj = acol[j * m + k];
            let ratio = rkj.abs() / norms[j];
            let shrink = (T::one() - ratio * ratio).max(T::zero());
            let candidate = norms[j] * shrink.sqrt();
            let drift = candidate / norms_ref[j];
            if drift * drift <= eps.sqrt() {
                let fresh = col_norm(&acol[j * m + k + 1..(j + 1) * m]);
                norms[j] = fresh;
                norms_ref[j] = fresh;
            } else {
                norms[j] = candidate;
            }
        }
    }

    let mut solution = Matrix::zeros(n, p);
    if rank == 0 {
        return Ok(LeastSquares { solution, rank });
    }
    let r = rank;
    // c = (Qᵀ B)[0..r]
    let c: Vec<Vec<T>> = (0..p).map(|j| bcol[j * m..j * m + r].to_vec()).collect();

    let y: Vec<Vec<T>> = if r == n {
        c.iter()
            .map(|cj| back_substitute_upper(&acol, m, r, cj))
            .collect()
    } else {
        min_norm_trapezoidal(&acol, m, n, r, &c)
    };

    for (j, yj) in y.iter().enumerate() {
        for (i, &val) in yj.iter().enumerate() {
            solution.set(perm[i], j, val);
        }
    }
    Ok(LeastSquares { solution, rank })
}

#[inline]
fn reflect<T: Scalar>(target: &mut [T], v: &[T], scale: T) {
    let s = crate::scalar::dot(v, target) * scale;
    if s != T::zero() {
        for (t, &vi) in target.iter_mut().zip(v) {
            *t -= s * vi;
        }
    }
}

fn swap_columns<T: Scalar>(acol: &mut [T], m: usize, a: usize, b: usize) {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (left, right) = acol.split_at_mut(hi * m);
    left[lo * m..(lo + 1) * m].swap_with_slice(&mut right[..m]);
}

/// Solves `R₁₁ y = c` where `R₁₁` is the leading upper-triangular block stored column-major.
fn back_substitute_upper<T: Scalar>(acol: &[T], m: usize, r: usize, c: &[T]) -> Vec<T> {
    let mut y = c.to_vec();
    for i in (0..r).rev() {
        let mut s = y[i];
        for j in i + 1..r {
            s -= acol[j * m + i] * y[j];
        }
        y[i] = s / acol[i * m + i];
    }
    y
}

/// Minimum-norm solution of the full-row-rank system `[R₁₁ R₁₂] y = c` via a QR of its transpose.
fn min_norm_trapezoidal<T: Scalar>(acol: &[T], m: usize, n: usize, r: usize, c: &[Vec<T>]) -> Vec<Vec<T>> {
    // Mt is n × r column-major: column i holds row i of the trapezoid.
    let mut mt = vec![T::zero(); n * r];
    for i in 0..r {
        for j in i..n {
            mt[i * n + j] = acol[j * m + i];
        }
    }
    let mut reflectors: Vec<(Vec<T>, T)> = Vec::with_capacity(r);
    let mut diag = vec![T::zero(); r];
    for i in 0..r {
        let x = &mt[i * n + i..(i + 1) * n];
        let xnorm = x.iter().fold(T::zero(), |s, &t| s + t * t).sqrt();
        let alpha = if x[0] >= T::zero() { -xnorm } else { xnorm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm2 = v.iter().fold(T::zero(), |s, &t| s + t * t);
        let scale = if vnorm2 == T::zero() { T::zero() } else { T::of(2.0) / vnorm2 };
        diag[i] = alpha;
        for j in i + 1..r {
            reflect(&mut mt[j * n + i..(j + 1) * n], &v, scale);
        }
        reflectors.push((v, scale));
    }

    c.iter()
        .map(|cj| {
            // L₂ᵀ z = c, with L₂ the upper-triangular factor of Mt.
            let mut z = vec![T::zero(); n];
            for i in 0..r {
                let mut s = cj[i];
                for (k, &zk) in z.iter().enumerate().take(i) {
                    s -= mt[i * n + k] * zk;
                }
                z[i] = s / diag[i];
            }
            for (i, (v, scale)) in reflectors.iter().enumerate().rev() {
                reflect(&mut z[i..], v, *scale);
            }
            z
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_square_system() {
        let a = Matrix::from_rows(&[[2.0_f64, 1.0], [1.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [5.0]]).unwrap();
        let ls = lstsq(&a, &b).unwrap();
        assert_eq!(ls.rank, 2);
        assert!((ls.solution.get(0, 0) - 0.8).abs() < 1e-14);
        assert!((ls.solution.get(1, 0) - 1.4).abs() < 1e-14);
    }

    #[test]
    fn duplicated_column_splits_weight_evenly() {
        // x1 == x2, y = 2x: minimum-norm answer is (1, 1).
        let a = Matrix::from_rows(&[[1.0_f64, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0], [4.0], [6.0]]).unwrap();
        let ls = lstsq(&a, &b).unwrap();
        assert_eq!(ls.rank, 1);
        assert!((ls.solution.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((ls.solution.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_gives_zero_solution() {
        let a = Matrix::<f64>::zeros(4, 3);
        let b = Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let ls = lstsq(&a, &b).unwrap();
        assert_eq!(ls.rank, 0);
        assert!(ls.solution.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn underdetermined_system_is_minimum_norm() {
        // Single equation x + y + z = 3 → (1, 1, 1).
        let a = Matrix::from_rows(&[[1.0_f64, 1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0]]).unwrap();
        let ls = lstsq(&a, &b).unwrap();
        for i in 0..3 {
            assert!((ls.solution.get(i, 0) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_row_mismatch_and_empty() {
        let a = Matrix::<f64>::zeros(3, 2);
        assert!(matches!(lstsq(&a, &Matrix::zeros(2, 1)), Err(Error::Dimension(_))));
        assert!(matches!(
            lstsq(&Matrix::<f64>::zeros(0, 2), &Matrix::zeros(0, 1)),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::from_rows(&[[1.0_f32, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0_f32], [2.0], [2.0]]).unwrap();
        let ls = lstsq(&a, &b).unwrap();
        assert!((ls.solution.get(0, 0) - 1.0).abs() < 1e-5);
        assert!((ls.solution.get(1, 0) - 1.0).abs() < 1e-5);
    }
}
