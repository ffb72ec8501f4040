//! Small dense complex matrices.
//!
//! Everything here works on the handful of dimensions the crate deals with
//! (system dimension `d`, superoperators of size `d²`, Choi matrices), so the
//! algorithms favour simplicity: Gauss-Jordan inversion, scaling-and-squaring
//! Taylor exponential and cyclic Jacobi for Hermitian spectra.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::{Real, C};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<C<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_real(rows: usize, cols: usize, values: &[T]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: values.iter().map(|&v| C::new(v, T::zero())).collect(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Diagonal matrix with the given entries.
    pub fn diag(entries: &[C<T>]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    /// Matrix unit `|r⟩⟨c|`.
    pub fn unit(n: usize, r: usize, c: usize) -> Self {
        let mut m = Self::zeros(n, n);
        m[(r, c)] = C::one();
        m
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C<T>> {
        self.data
    }

    pub fn scale(&self, s: C<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn scale_real(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn trace(&self) -> C<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest entry modulus.
    pub fn max_norm(&self) -> T {
        self.data
            .iter()
            .map(|v| v.norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Maximum absolute row sum (induced infinity norm).
    pub fn norm_inf(&self) -> T {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)].norm()).sum::<T>())
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let (r2, c2) = (other.rows, other.cols);
        Self::from_fn(self.rows * r2, self.cols * c2, |r, c| {
            self[(r / r2, c / c2)] * other[(r % r2, c % c2)]
        })
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a.is_zero() {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[C<T>]) -> Vec<C<T>> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Hermiticity defect `max |A - A†|`.
    pub fn hermiticity_defect(&self) -> T {
        if !self.is_square() {
            return T::infinity();
        }
        let mut worst = T::zero();
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::Dimension("inverse of a non-square matrix".into()));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self.max_norm().max(T::min_positive_value());
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a[(i, col)]
                        .norm()
                        .partial_cmp(&a[(j, col)].norm())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("non-empty range");
            if a[(pivot, col)].norm() <= scale * T::epsilon() * T::from_usize_lossy(n) {
                return Err(Error::Singular);
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let p = a[(col, col)].inv();
            for c in 0..n {
                a[(col, c)] = a[(col, c)] * p;
                inv[(col, c)] = inv[(col, c)] * p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f.is_zero() {
                    continue;
                }
                for c in 0..n {
                    let ac = a[(col, c)];
                    let ic = inv[(col, c)];
                    a[(r, c)] -= f * ac;
                    inv[(r, c)] -= f * ic;
                }
            }
        }
        Ok(inv)
    }

    /// Matrix exponential by scaling and squaring of a truncated Taylor series.
    pub fn expm(&self) -> Self {
        assert!(self.is_square(), "expm of a non-square matrix");
        let n = self.rows;
        let norm = self.norm_inf();
        let mut squarings = 0u32;
        let mut s = T::one();
        while norm * s > T::half() {
            s = s * T::half();
            squarings += 1;
        }
        let a = self.scale_real(s);
        let mut result = Self::identity(n);
        let mut term = Self::identity(n);
        for k in 1..=24usize {
            term = term.matmul(&a).scale_real(T::one() / T::from_usize_lossy(k));
            result = &result + &term;
            if term.max_norm() <= T::epsilon() * T::lit(1e-3) {
                break;
            }
        }
        for _ in 0..squarings {
            result = result.matmul(&result);
        }
        result
    }

    /// Eigenvalues of a Hermitian matrix in ascending order.
    ///
    /// The complex Hermitian `A + iB` is embedded into the real symmetric
    /// `[[A, -B], [B, A]]`, whose spectrum is that of `A + iB` with every
    /// eigenvalue doubled.
    pub fn hermitian_eigenvalues(&self) -> Vec<T> {
        assert!(self.is_square(), "eigenvalues of a non-square matrix");
        let n = self.rows;
        if n == 0 {
            return Vec::new();
        }
        let m = 2 * n;
        let mut s = vec![T::zero(); m * m];
        for r in 0..n {
            for c in 0..n {
                // symmetrize to absorb round-off in the input
                let v = (self[(r, c)] + self[(c, r)].conj()) * T::half();
                s[r * m + c] = v.re;
                s[(r + n) * m + c + n] = v.re;
                s[(r + n) * m + c] = v.im;
                s[r * m + c + n] = -v.im;
            }
        }
        let mut eig = jacobi_eigenvalues(&mut s, m);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        eig.into_iter().step_by(2).collect()
    }

    /// Smallest eigenvalue of a Hermitian matrix.
    pub fn min_hermitian_eigenvalue(&self) -> T {
        self.hermitian_eigenvalues()
            .first()
            .copied()
            .unwrap_or(T::zero())
    }
}

/// Cyclic Jacobi rotations on a dense real symmetric matrix (destroyed).
fn jacobi_eigenvalues<T: Real>(a: &mut [T], n: usize) -> Vec<T> {
    let frob = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    if frob == T::zero() {
        return vec![T::zero(); n];
    }
    let tol = frob * T::epsilon() * T::lit(0.01);
    for _sweep in 0..100 {
        let off = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<T>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (T::two() * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

impl<T: Real> Index<(usize, usize)> for CMatrix<T> {
    type Output = C<T>;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C<T> {
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for CMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C<T> {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Real> Add for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn add(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn sub(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl<T: Real> Mul for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn mul(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        self.matmul(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C<f64> {
        C::new(re, im)
    }

    #[test]
    fn inverse_roundtrip() {
        let a = CMatrix::from_vec(
            3,
            3,
            vec![
                c(2.0, 0.0),
                c(1.0, 1.0),
                c(0.0, 0.0),
                c(0.0, -1.0),
                c(3.0, 0.0),
                c(1.0, 0.0),
                c(1.0, 0.0),
                c(0.0, 0.0),
                c(1.0, 0.5),
            ],
        )
        .unwrap();
        let inv = a.inverse().unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&CMatrix::identity(3)) < 1e-14);
    }

    #[test]
    fn singular_is_rejected() {
        let a = CMatrix::<f64>::from_real(2, 2, &[1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(a.inverse(), Err(Error::Singular));
    }

    #[test]
    fn expm_of_rotation_generator() {
        // exp(t [[0, -1], [1, 0]]) is a rotation by t
        let t = 2.7;
        let a = CMatrix::<f64>::from_real(2, 2, &[0.0, -t, t, 0.0]).unwrap();
        let e = a.expm();
        let expected =
            CMatrix::from_real(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]).unwrap();
        assert!(e.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn expm_of_diagonal_is_elementwise() {
        let a = CMatrix::diag(&[c(-3.0, 1.0), c(0.5, 0.0), c(-10.0, -2.0)]);
        let e = a.expm();
        for i in 0..3 {
            let z = a[(i, i)].exp();
            assert!((e[(i, i)] - z).norm() < 1e-13 * z.norm().max(1.0));
        }
    }

    #[test]
    fn hermitian_spectrum_of_pauli_y() {
        let y = CMatrix::from_vec(2, 2, vec![c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)])
            .unwrap();
        let e = y.hermitian_eigenvalues();
        assert!((e[0] + 1.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hermitian_spectrum_matches_trace_and_determinant() {
        let h = CMatrix::from_vec(
            3,
            3,
            vec![
                c(2.0, 0.0),
                c(0.3, -0.4),
                c(0.0, 1.0),
                c(0.3, 0.4),
                c(-1.0, 0.0),
                c(0.2, 0.0),
                c(0.0, -1.0),
                c(0.2, 0.0),
                c(0.5, 0.0),
            ],
        )
        .unwrap();
        let e = h.hermitian_eigenvalues();
        let tr: f64 = e.iter().sum();
        assert!((tr - h.trace().re).abs() < 1e-13);
        let tr2: f64 = e.iter().map(|x| x * x).sum();
        let hh = h.matmul(&h).trace().re;
        assert!((tr2 - hh).abs() < 1e-12);
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn kron_shapes_and_entries() {
        let a = CMatrix::<f64>::from_real(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = CMatrix::<f64>::identity(2);
        let k = a.kron(&b);
        assert_eq!((k.rows(), k.cols()), (4, 4));
        assert_eq!(k[(2, 0)], c(3.0, 0.0));
        assert_eq!(k[(3, 1)], c(3.0, 0.0));
        assert_eq!(k[(2, 1)], c(0.0, 0.0));
    }
}
