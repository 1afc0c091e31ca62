//! Dense row-major kernels for the small systems the GLM solver produces.
//!
//! Design dimensions here are a handful to a few dozen columns, so plain
//! Cholesky on full storage is all that is needed.

use crate::error::{CaitError, Result};
use crate::scalar::Real;

/// Lower Cholesky factor of a symmetric positive definite `n x n` matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    lower: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factor `a + jitter * scale * I`, where `scale` is the mean diagonal.
    ///
    /// A pivot below `singular_tol * scale` is reported as a singular design.
    pub fn factor(a: &[T], n: usize, jitter: T, singular_tol: T) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut scale = T::zero();
        for i in 0..n {
            scale += a[i * n + i].abs();
        }
        scale = if n > 0 { scale / T::from_count(n) } else { T::one() };
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(CaitError::SingularDesign);
        }
        let ridge = jitter * scale;
        let floor = singular_tol * scale;
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[j * n + j] + ridge;
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > floor) {
                return Err(CaitError::SingularDesign);
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let l = &self.lower;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }

    /// Solve against the unjittered `a`, removing the ridge bias with two
    /// rounds of iterative refinement.
    pub fn solve_refined(&self, a: &[T], b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x = self.solve(b);
        for _ in 0..2 {
            let mut r: Vec<T> = (0..n)
                .map(|i| b[i] - (0..n).map(|j| a[i * n + j] * x[j]).sum::<T>())
                .collect();
            self.solve_in_place(&mut r);
            for (xi, ri) in x.iter_mut().zip(&r) {
                *xi += *ri;
            }
        }
        x
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Full inverse, symmetric, row-major.
    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = T::zero());
            col[j] = T::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        symmetrize(&mut inv, n);
        inv
    }
}

/// `a * b` for square row-major matrices.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `g^T M g` for a symmetric row-major `M`.
pub fn quad_form<T: Real>(m: &[T], g: &[T]) -> T {
    let n = g.len();
    let mut acc = T::zero();
    for i in 0..n {
        let mut row = T::zero();
        for j in 0..n {
            row += m[i * n + j] * g[j];
        }
        acc += g[i] * row;
    }
    acc
}

/// Accumulate `w * x x^T` into the lower triangle of `acc`.
#[inline]
pub fn syr_lower<T: Real>(acc: &mut [T], x: &[T], w: T) {
    let n = x.len();
    for (i, (row, &xi)) in acc.chunks_exact_mut(n).zip(x).enumerate() {
        let wxi = w * xi;
        for (r, &xj) in row[..=i].iter_mut().zip(&x[..=i]) {
            *r += wxi * xj;
        }
    }
}

/// Copy the lower triangle onto the upper triangle.
pub fn fill_upper<T: Real>(m: &mut [T], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            m[i * n + j] = m[j * n + i];
        }
    }
}

pub fn symmetrize<T: Real>(m: &mut [T], n: usize) {
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[i * n + j] + m[j * n + i]) * half;
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
}
