//! Feature-quality metrics and spectral diagnostics.
//!
//! * [`wcd`]: norm-weighted cosine distance between student and teacher
//!   hidden weights.
//! * [`test_lrfit`]: test loss after refitting the linear layer on frozen
//!   hidden weights.
//! * [`smallest_eig_ntk`], [`pinv_frobenius_norm`]: spectral quantities of
//!   the NTK matrix and the Jacobian.
//! * [`theory`]: convergence-rate and no-blow-up threshold arithmetic.

pub mod theory;
mod trace;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{pinv_cutoff, smallest_eigenpair_inverse_iteration, sym_eigenvalues, symmetrize_from_lower, FULL_EIGEN_LIMIT};
use crate::model::{forward, ntk_matrix, Activation, Scaling, TwoLayerNet};
use crate::objective::mse;
use crate::optim::{min_norm_linear_fit, LinearFitOptions};

pub use theory::{blowup_threshold, pl_residual, theory_rates, PlResidual, Rates, TheoryConstants};
pub use trace::{MetricSelection, MetricTrace, TraceEntry, TraceRecorder};

/// Weighted cosine distance
/// `2 sum_i p_i (1 - max_j cos(u_i, u*_j))`, `p_i = |u_i|^2 / sum_k |u_k|^2`.
///
/// Zero-norm student rows get weight 0; zero-norm teacher rows are skipped.
/// Per-unit terms are summed in sorted order so the value does not depend
/// on the order of the rows.
pub fn wcd(u: &DMatrix<f64>, u_star: &DMatrix<f64>) -> Result<f64> {
    if u.ncols() != u_star.ncols() {
        return Err(Error::dim("teacher hidden weight columns", u.ncols(), u_star.ncols()));
    }
    let teacher: Vec<(DVector<f64>, f64)> = u_star
        .row_iter()
        .map(|r| {
            let r = r.transpose();
            let norm = r.norm();
            (r, norm)
        })
        .filter(|(_, norm)| *norm > 0.0)
        .collect();
    if teacher.is_empty() {
        return Err(Error::DegenerateWeights("every teacher row is zero".into()));
    }

    let mut units: Vec<(f64, f64)> = Vec::with_capacity(u.nrows());
    for row in u.row_iter() {
        let sq = row.norm_squared();
        if sq == 0.0 {
            continue;
        }
        let norm = sq.sqrt();
        let best = teacher
            .iter()
            .map(|(t, tn)| (row.dot(&t.transpose()) / (norm * tn)).clamp(-1.0, 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        units.push((sq, 1.0 - best));
    }
    if units.is_empty() {
        return Err(Error::DegenerateWeights("every student row is zero".into()));
    }
    units.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total: f64 = units.iter().map(|(sq, _)| sq).sum();
    let weighted: f64 = units.iter().map(|(sq, dist)| sq * dist).sum();
    Ok(2.0 * weighted / total)
}

/// Test loss of the minimum-norm linear layer fitted on the training split
/// with hidden weights `u` frozen.
pub fn test_lrfit(
    u: &DMatrix<f64>,
    act: Activation,
    scaling: Scaling,
    train: (&DMatrix<f64>, &DVector<f64>),
    test: (&DMatrix<f64>, &DVector<f64>),
) -> Result<f64> {
    let fit = min_norm_linear_fit(u, act, scaling, train.0, train.1, &LinearFitOptions::default())?;
    let net = TwoLayerNet::new(fit.v, u.clone(), scaling, act)?;
    let pred = forward(&net, test.0)?;
    if pred.len() != test.1.len() {
        return Err(Error::dim("test targets", pred.len(), test.1.len()));
    }
    Ok(mse(&pred, test.1))
}

/// Smallest eigenvalue of the NTK matrix, clamped at 0.
pub fn smallest_eig_ntk(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<f64> {
    let a = ntk_matrix(net, x)?;
    let value = if a.nrows() <= FULL_EIGEN_LIMIT {
        sym_eigenvalues(&a)?[0]
    } else {
        smallest_eigenpair_inverse_iteration(&a, None, 1e-10, 2000)?.value
    };
    Ok(value.max(0.0))
}

/// Frobenius norm of the pseudo-inverse `J^+ = J^T (J J^T)^+` of a full
/// row-rank matrix, `sqrt(sum_i 1 / s_i^2)`.
pub fn pinv_frobenius_norm(j: &DMatrix<f64>) -> Result<f64> {
    let rows = j.nrows();
    if rows == 0 {
        return Err(Error::Empty("jacobian".into()));
    }
    let mut jjt = j * j.transpose();
    symmetrize_from_lower(&mut jjt);
    let vals = sym_eigenvalues(&jjt)?;
    let largest = vals[rows - 1];
    let cutoff = pinv_cutoff(largest, rows);
    let rank = vals.iter().filter(|&&l| l > cutoff && l > 0.0).count();
    if rank < rows {
        return Err(Error::RankDeficient { rank, rows });
    }
    Ok(vals.iter().map(|l| 1.0 / l).sum::<f64>().sqrt())
}
