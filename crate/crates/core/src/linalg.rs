//! Small dense linear-algebra helpers shared by the kernel and inference code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative diagonal jitter: `JITTER_SCALE * trace / n` is added before factorizing.
pub const JITTER_SCALE: f64 = 1e-10;

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Jitter added to the diagonal of `a` before inversion.
pub fn jitter_for(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1) as f64;
    JITTER_SCALE * (a.trace().abs() / n)
}

/// Cholesky factor of `a + jitter * I`, with `jitter = 1e-10 * trace / n`.
///
/// Fails hard when the jittered matrix is still not positive definite.
pub fn jittered_cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!("{what} is not square")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    let mut m = a.clone();
    symmetrize(&mut m);
    let jitter = jitter_for(&m);
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m).ok_or_else(|| {
        Error::Numerical(format!("{what} is singular after diagonal jitter {jitter:e}"))
    })
}

/// Inverse of a symmetric positive definite matrix, via [`jittered_cholesky`].
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = jittered_cholesky(a, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = a.clone().symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_operator_norm(a: &DMatrix<f64>) -> f64 {
    let (lo, hi) = eigen_range(a);
    lo.abs().max(hi.abs())
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_max_eigen(a: &DMatrix<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda
}

/// Copies each row of `x` into its own vector.
pub fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}
