//! Dense symmetric helpers shared by the optimizer and the metrics.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Size above which the smallest NTK eigenvalue is found by inverse
/// iteration instead of a full eigendecomposition.
pub const FULL_EIGEN_LIMIT: usize = 1000;

/// Copies the lower triangle onto the upper one so the matrix is exactly
/// symmetric.
pub fn symmetrize_from_lower(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// `A^T A`, exactly symmetric. Goes through an explicit transpose so the
/// product uses the blocked matrix-multiply kernel.
pub fn gram_of_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = a.transpose() * a;
    symmetrize_from_lower(&mut g);
    g
}

fn eigen_failure(a: &DMatrix<f64>) -> Error {
    Error::EigenFailure {
        size: a.nrows(),
        trace: a.trace(),
        max_abs: a.amax(),
    }
}

fn check_square_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim("square matrix", a.nrows(), a.ncols()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(eigen_failure(a));
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_square_finite(a)?;
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut vals: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(eigen_failure(a));
    }
    vals.sort_by(f64::total_cmp);
    Ok(DVector::from_vec(vals))
}

/// Full eigendecomposition, eigenpairs sorted by ascending eigenvalue.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_square_finite(a)?;
    let n = a.nrows();
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, 1000 * n.max(1))
        .ok_or_else(|| eigen_failure(a))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok((vals, vecs))
}

/// Smallest eigenvalue of a symmetric matrix by full decomposition.
pub fn smallest_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    let vals = sym_eigenvalues(a)?;
    vals.iter()
        .copied()
        .next()
        .ok_or_else(|| Error::Empty("eigenvalue of an empty matrix".into()))
}

/// Result of [`smallest_eigenpair_inverse_iteration`].
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
    pub iterations: usize,
}

/// Smallest eigenpair of a symmetric positive semi-definite matrix by
/// shifted inverse power iteration.
///
/// The shift `-delta` keeps `A + delta I` positive definite so a single
/// Cholesky factor serves every iteration. Stops when two successive
/// Rayleigh quotients agree to `rel_tol`. `warm_start` is typically the
/// eigenvector from a previous call on a nearby matrix.
pub fn smallest_eigenpair_inverse_iteration(
    a: &DMatrix<f64>,
    warm_start: Option<&DVector<f64>>,
    rel_tol: f64,
    max_iters: usize,
) -> Result<EigenPair> {
    check_square_finite(a)?;
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Empty("eigenvalue of an empty matrix".into()));
    }
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut delta = scale * 1e-12;
    let chol = loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += delta;
        }
        if let Some(c) = Cholesky::new(shifted) {
            break c;
        }
        delta *= 10.0;
        if delta > scale {
            return Err(eigen_failure(a));
        }
    };

    let mut x = match warm_start {
        Some(w) if w.len() == n && w.norm() > 0.0 => w.normalize(),
        // Deterministic start with no special alignment to any basis vector.
        _ => DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_749_895).fract()).normalize(),
    };
    let mut value = (x.transpose() * a * &x)[(0, 0)];
    for it in 1..=max_iters {
        let y = chol.solve(&x);
        let norm = y.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(eigen_failure(a));
        }
        x = y / norm;
        let next = (x.transpose() * a * &x)[(0, 0)];
        let converged = (next - value).abs() <= rel_tol * next.abs().max(f64::MIN_POSITIVE);
        value = next;
        if converged {
            return Ok(EigenPair {
                value,
                vector: x,
                iterations: it,
            });
        }
    }
    Ok(EigenPair {
        value,
        vector: x,
        iterations: max_iters,
    })
}

/// Moore-Penrose pseudo-inverse applied to a vector for a symmetric PSD
/// matrix, `A^+ b`. Eigenvalues at or below `cutoff` are treated as zero.
/// Returns the solution and the numerical rank.
pub fn sym_pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, cutoff: f64) -> Result<(DVector<f64>, usize)> {
    if b.len() != a.nrows() {
        return Err(Error::dim("pseudo-inverse right-hand side", a.nrows(), b.len()));
    }
    let (vals, vecs) = sym_eigen(a)?;
    let coeffs = vecs.transpose() * b;
    let mut out = DVector::zeros(a.nrows());
    let mut rank = 0;
    for (k, &lam) in vals.iter().enumerate() {
        if lam > cutoff {
            rank += 1;
            out.axpy(coeffs[k] / lam, &vecs.column(k), 1.0);
        }
    }
    Ok((out, rank))
}

/// Relative rank cutoff for an `n x n` PSD matrix with largest eigenvalue
/// `largest`: `largest * n * 2^-45`.
pub fn pinv_cutoff(largest: f64, n: usize) -> f64 {
    largest * n as f64 * 2f64.powi(-45)
}
