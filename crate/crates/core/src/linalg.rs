use nalgebra::DMatrix;

use crate::Real;

pub(crate) fn inf_norm<T: Real>(m: &DMatrix<T>) -> T {
    let mut best = T::zero();
    for i in 0..m.nrows() {
        let mut s = T::zero();
        for j in 0..m.ncols() {
            s += m[(i, j)].abs();
        }
        best = best.max(s);
    }
    best
}

/// Matrix exponential by scaling and squaring around a Taylor series that is
/// truncated once a term drops below `tol` relative to the partial sum.
pub(crate) fn expm<T: Real>(m: &DMatrix<T>, tol: T) -> DMatrix<T> {
    let n = m.nrows();
    let norm = inf_norm(m);
    let mut squarings = 0u32;
    let mut scale = T::one();
    while norm * scale > T::lit(0.5) {
        scale *= T::lit(0.5);
        squarings += 1;
    }
    let a = m * scale;
    let mut sum = DMatrix::<T>::identity(n, n);
    let mut term = DMatrix::<T>::identity(n, n);
    for k in 1..200 {
        term = &term * &a * (T::one() / T::lit(k as f64));
        sum += &term;
        if inf_norm(&term) <= tol * inf_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Largest eigenvalue modulus, via the real Schur form.
pub(crate) fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .fold(T::zero(), |acc, c| acc.max((c.re * c.re + c.im * c.im).sqrt()))
}

/// Pivot-free dense LDLᵀ with fixed capacity, so refactoring never allocates.
/// Valid for positive-definite and quasi-definite matrices.
#[derive(Debug, Clone)]
pub(crate) struct Ldl<T: Real> {
    cap: usize,
    n: usize,
    l: Vec<T>,
    d: Vec<T>,
}

impl<T: Real> Ldl<T> {
    pub fn with_capacity(cap: usize) -> Self {
        Self {
            cap,
            n: 0,
            l: vec![T::zero(); cap * cap],
            d: vec![T::zero(); cap],
        }
    }

    /// Factors the `n`×`n` symmetric matrix whose lower triangle is given by
    /// `entry(i, j)` with `i >= j`. Returns `false` on a zero or non-finite
    /// pivot.
    pub fn factor_with(&mut self, n: usize, mut entry: impl FnMut(usize, usize) -> T) -> bool {
        assert!(n <= self.cap, "LDL capacity exceeded");
        self.n = n;
        let cap = self.cap;
        let tiny = T::lit(1e-300).max(T::min_value().unwrap_or(T::zero()));
        for j in 0..n {
            let mut dj = entry(j, j);
            {
                let lj = &self.l[j * cap..j * cap + j];
                for k in 0..j {
                    dj -= lj[k] * lj[k] * self.d[k];
                }
            }
            if !dj.is_finite() || dj.abs() <= tiny {
                return false;
            }
            self.d[j] = dj;
            for i in j + 1..n {
                let mut v = entry(i, j);
                for k in 0..j {
                    v -= self.l[i * cap + k] * self.l[j * cap + k] * self.d[k];
                }
                self.l[i * cap + j] = v / dj;
            }
        }
        true
    }

    pub fn pivots(&self) -> &[T] {
        &self.d[..self.n]
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let (n, cap) = (self.n, self.cap);
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= self.l[i * cap + k] * b[k];
            }
            b[i] = v;
        }
        for i in 0..n {
            b[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            for k in i + 1..n {
                v -= self.l[k * cap + i] * b[k];
            }
            b[i] = v;
        }
    }
}
