use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{gram_of_columns, pinv_cutoff, sym_eigen, symmetrize_from_lower};
use crate::model::{feature_matrix, Activation, Scaling};

/// Options for [`min_norm_linear_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFitOptions {
    /// Return `Gamma (Gamma^T Gamma)^+ y` without dividing by the output
    /// factor `a(M)`. The resulting model does not reproduce `y`; kept for
    /// comparison only.
    pub literal_unscaled: bool,
    /// Eigenvalues of `Gamma^T Gamma` below `largest * cutoff_scale` are
    /// dropped. Defaults to `N * 2^-45`.
    pub cutoff_scale: Option<f64>,
    /// Relative residual above which a warning is logged.
    pub warn_tolerance: f64,
}

impl Default for LinearFitOptions {
    fn default() -> Self {
        LinearFitOptions {
            literal_unscaled: false,
            cutoff_scale: None,
            warn_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub v: DVector<f64>,
    /// Numerical rank of `Gamma^T Gamma`.
    pub rank: usize,
    /// `|a(M) Gamma^T v - y|`
    pub residual_norm: f64,
}

/// Minimum-norm linear layer on frozen hidden weights `u`.
///
/// Solves `a(M) Gamma^T v = y` in the least-squares sense with the smallest
/// `|v|`: `v = Gamma (Gamma^T Gamma)^+ y / a(M)`. The pseudo-inverse is taken
/// on the `N x N` matrix `Gamma^T Gamma`. When the Gram matrix is
/// invertible the fitted model interpolates `y`.
pub fn min_norm_linear_fit(
    u: &DMatrix<f64>,
    act: Activation,
    scaling: Scaling,
    x: &DMatrix<f64>,
    targets: &DVector<f64>,
    opts: &LinearFitOptions,
) -> Result<LinearFit> {
    if targets.len() != x.nrows() {
        return Err(Error::dim("targets vs batch rows", x.nrows(), targets.len()));
    }
    let m = u.nrows();
    let n = x.nrows();
    let features = feature_matrix(u, act, x)?;
    let mut kernel = gram_of_columns(&features);
    symmetrize_from_lower(&mut kernel);

    let (vals, vecs) = sym_eigen(&kernel)?;
    let largest = vals.iter().copied().fold(0.0, f64::max);
    let cutoff = match opts.cutoff_scale {
        Some(s) => largest * s,
        None => pinv_cutoff(largest, n),
    };
    let coeffs = vecs.tr_mul(targets);
    let mut c = DVector::zeros(n);
    let mut rank = 0;
    for (k, &lam) in vals.iter().enumerate() {
        if lam > cutoff && lam > 0.0 {
            rank += 1;
            c.axpy(coeffs[k] / lam, &vecs.column(k), 1.0);
        }
    }
    let factor = scaling.factor(m);
    let mut v = &features * c;
    if !opts.literal_unscaled {
        v /= factor;
    }
    let residual_norm = (features.tr_mul(&v) * factor - targets).norm();
    if !opts.literal_unscaled && residual_norm > opts.warn_tolerance * targets.norm().max(1.0) {
        log::warn!("min-norm fit leaves residual {residual_norm:e} (rank {rank} of {n})");
    }
    Ok(LinearFit { v, rank, residual_norm })
}
