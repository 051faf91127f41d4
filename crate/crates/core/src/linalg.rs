//! Small dense row-major matrices. Factorizations are delegated to nalgebra
//! and run in `f64` whatever the scalar type.

use std::marker::PhantomData;
use std::ops::{Index, IndexMut};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| crate::scalar::dot(self.row(r), v)).collect()
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        Self::from_fn(self.rows, other.cols, |r, c| {
            (0..self.cols).fold(T::zero(), |acc, k| acc + self[(r, k)] * other[(k, c)])
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// LU factorization with partial pivoting. `None` when a pivot is exactly zero.
    pub fn lu(&self) -> Option<Lu<T>> {
        Lu::factor(self)
    }

    pub fn svd(&self) -> Svd<T> {
        Svd::compute(self)
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)].as_f64())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// LU factorization with partial pivoting, computed by nalgebra in `f64`.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    inner: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    marker: PhantomData<T>,
}

impl<T: Scalar> Lu<T> {
    fn factor(a: &Matrix<T>) -> Option<Self> {
        assert_eq!(a.rows, a.cols, "LU needs a square matrix");
        let inner = a.to_nalgebra().lu();
        let u = inner.u();
        if !(0..a.rows).all(|i| u[(i, i)] != 0.0 && u[(i, i)].is_finite()) {
            return None;
        }
        Some(Self { inner, marker: PhantomData })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let rhs = nalgebra::DVector::from_iterator(b.len(), b.iter().map(|v| v.as_f64()));
        let x = self.inner.solve(&rhs).expect("factor checked the pivots");
        x.iter().map(|&v| T::lit(v)).collect()
    }

    pub fn determinant(&self) -> T {
        T::lit(self.inner.determinant())
    }
}

/// Thin SVD `A = U diag(s) Vᵀ` with singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> Svd<T> {
    fn compute(a: &Matrix<T>) -> Self {
        let svd = nalgebra::linalg::SVD::new(a.to_nalgebra(), true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested Vᵀ");
        let k = svd.singular_values.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        Self {
            u: Matrix::from_fn(a.rows, k, |r, c| T::lit(u[(r, order[c])])),
            s: order.iter().map(|&i| T::lit(svd.singular_values[i])).collect(),
            v: Matrix::from_fn(a.cols, k, |r, c| T::lit(v_t[(order[c], r)])),
        }
    }

    pub fn max_singular(&self) -> T {
        self.s.first().copied().unwrap_or(T::zero())
    }

    pub fn min_singular(&self) -> T {
        self.s.last().copied().unwrap_or(T::zero())
    }

    /// Number of singular values above `rel * s_max`.
    pub fn rank(&self, rel: T) -> usize {
        let cut = rel * self.max_singular();
        self.s.iter().filter(|&&s| s > cut).count()
    }

    /// Minimum-norm least-squares solution, discarding singular values at or
    /// below `rel * s_max`.
    pub fn solve(&self, b: &[T], rel: T) -> Vec<T> {
        assert_eq!(b.len(), self.u.nrows());
        let cut = rel * self.max_singular();
        let n = self.v.nrows();
        let mut x = vec![T::zero(); n];
        for (k, &sk) in self.s.iter().enumerate() {
            if sk <= cut {
                continue;
            }
            let coef = (0..b.len()).fold(T::zero(), |acc, r| acc + self.u[(r, k)] * b[r]) / sk;
            for (r, xr) in x.iter_mut().enumerate() {
                *xr = *xr + coef * self.v[(r, k)];
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_pivoting_system() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]]);
        let x = [1.0, -2.0, 0.5];
        let b = a.mul_vec(&x);
        let got = a.lu().unwrap().solve(&b);
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-14);
        }
        assert!((a.lu().unwrap().determinant() - (-5.0)).abs() < 1e-14);
    }

    #[test]
    fn lu_rejects_exactly_singular() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(a.lu().is_none() || a.lu().unwrap().determinant().abs() < 1e-15);
    }

    #[test]
    fn svd_of_diagonal_is_sorted_abs() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, -3.0, 0.0], vec![0.0, 0.0, 2.0]]);
        let svd = a.svd();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_detects_rank_and_minimum_norm_solution() {
        // I - 1 pᵀ with p summing to one has the all-ones kernel
        let p = [0.25, 0.75];
        let a: Matrix<f64> = Matrix::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 } - p[c]);
        let svd = a.svd();
        assert_eq!(svd.rank(1e-10), 1);
        let b = [0.75, -0.25];
        let x = svd.solve(&b, 1e-10);
        let back = a.mul_vec(&x);
        assert!((back[0] - b[0]).abs() < 1e-14 && (back[1] - b[1]).abs() < 1e-14);
        assert!((x[0] + x[1]).abs() < 1e-14, "minimum norm solution is orthogonal to the kernel");
    }

    #[test]
    fn svd_reconstructs_rectangular() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let svd = a.svd();
        let rebuilt = Matrix::from_fn(3, 2, |r, c| {
            (0..2).fold(0.0, |acc, k| acc + svd.u[(r, k)] * svd.s[k] * svd.v[(c, k)])
        });
        for r in 0..3 {
            for c in 0..2 {
                assert!((rebuilt[(r, c)] - a[(r, c)]).abs() < 1e-12);
            }
        }
    }
}
