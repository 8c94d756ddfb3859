//! Small dense linear-algebra helpers shared across the solver modules.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::scalar::{real_usize, Real};
use crate::Result;

/// Returns the symmetrised copy `(M + M') / 2`.
pub(crate) fn symmetrized<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::from_f64(0.5).unwrap();
    (m + m.transpose()) * half
}

/// Max-norm of `M - M'`, the symmetry defect.
pub(crate) fn symmetry_residual<T: Real>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Largest absolute entry.
pub(crate) fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
}

/// Eigenvalues of a symmetric matrix, ascending. The input is symmetrised
/// first so callers may pass matrices with rounding-level asymmetry.
pub(crate) fn sym_eigenvalues<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut ev = symmetrized(m).symmetric_eigenvalues();
    let mut vals: Vec<T> = ev.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    for (i, v) in vals.into_iter().enumerate() {
        ev[i] = v;
    }
    ev
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues descending
/// and columns of the returned matrix the matching eigenvectors.
pub(crate) fn sym_eigen_desc<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = nalgebra::SymmetricEigen::new(symmetrized(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalues are finite")
    });
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = eig.eigenvalues[src];
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Zero-dimensional matrices factor trivially; a failed factorisation is
/// reported with the caller-supplied context.
pub(crate) fn cholesky<T: Real>(
    m: &DMatrix<T>,
    context: &str,
) -> Result<nalgebra::Cholesky<T, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(symmetrized(m)).ok_or_else(|| Error::SingularSystem {
        context: format!("{context}: Cholesky of a matrix that is not positive definite"),
    })
}

/// Solves `M X = B` for symmetric positive-definite `M`.
pub(crate) fn solve_spd<T: Real>(
    m: &DMatrix<T>,
    b: &DMatrix<T>,
    context: &str,
) -> Result<DMatrix<T>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, b.ncols()));
    }
    Ok(cholesky(m, context)?.solve(b))
}

/// Inverse of a symmetric positive-definite matrix.
pub(crate) fn inv_spd<T: Real>(m: &DMatrix<T>, context: &str) -> Result<DMatrix<T>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    Ok(cholesky(m, context)?.inverse())
}

/// Sums a slice by recursive pairwise (cascade) summation.
///
/// The reduction tree depends only on the slice length, so results are
/// bit-stable for a fixed input order regardless of thread count upstream,
/// and rounding error grows like `O(log n)` instead of `O(n)`.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    const BASE: usize = 32;
    if xs.len() <= BASE {
        let mut acc = T::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean (pairwise summation).
///
/// A single sample has standard error zero by convention.
pub(crate) fn mean_and_se<T: Real>(xs: &[T]) -> (T, T) {
    let n = xs.len();
    assert!(n > 0, "mean of an empty sample");
    let nt = real_usize::<T>(n);
    let mean = pairwise_sum(xs) / nt;
    if n == 1 {
        return (mean, T::zero());
    }
    let devs: Vec<T> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&devs) / real_usize::<T>(n - 1);
    (mean, (var / nt).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_integers() {
        let xs: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn eigenvalues_sorted_ascending() {
        let m = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let ev = sym_eigenvalues(&m);
        assert!((ev[0] + 1.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_desc_reconstructs_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        let rebuilt = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!(max_abs(&(&rebuilt - &m)) < 1e-12);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn mean_and_se_of_constant_sample_is_exact() {
        let xs = vec![2.5f64; 64];
        let (mean, se) = mean_and_se(&xs);
        assert_eq!(mean, 2.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn zero_dimensional_spd_solve_is_empty() {
        let m = DMatrix::<f64>::zeros(0, 0);
        let b = DMatrix::<f64>::zeros(0, 3);
        let x = solve_spd(&m, &b, "test").unwrap();
        assert_eq!(x.shape(), (0, 3));
    }
}
