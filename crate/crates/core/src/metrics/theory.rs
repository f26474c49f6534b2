//! Rate and threshold arithmetic for the continuous-time Gauss-Newton
//! flow, plus the linear-layer PL residual.
//!
//! Conventions: `mu` and `l_smooth` are the strong-convexity and
//! smoothness constants of the loss in function space (`1/N` for the MSE
//! with the Euclidean inner product); `mu_h`, `l_h` bound the spectrum of
//! `H`; `alpha` is the damping strength; `sigma0` is the square root of the
//! smallest eigenvalue of the Gram matrix at initialization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_of_columns, smallest_eigenvalue, symmetrize_from_lower};
use crate::model::{feature_matrix, Activation, Scaling};
use crate::objective::{mse_loss_and_grad, mse_strong_convexity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub mu: f64,
    pub l_smooth: f64,
    pub mu_h: f64,
    pub l_h: f64,
    pub alpha: f64,
    pub sigma0: f64,
    /// Radius of the ball around the initial parameters.
    pub r: f64,
    /// Bound on the operator norm of the Jacobian's derivative over the
    /// ball. Not computable in general; supplied by the caller.
    pub c_r: f64,
    pub n: usize,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu", self.mu),
            ("l_smooth", self.l_smooth),
            ("mu_h", self.mu_h),
            ("l_h", self.l_h),
            ("sigma0", self.sigma0),
            ("r", self.r),
            ("c_r", self.c_r),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {value}")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if self.mu > self.l_smooth {
            return Err(Error::invalid("mu", "must not exceed l_smooth"));
        }
        if self.mu_h > self.l_h {
            return Err(Error::invalid("mu_h", "must not exceed l_h"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    /// `2 mu / (L_H (1 + alpha / mu_H))`
    pub mu_gn: f64,
    /// `mu * sigma(w0) / 4`, when the initial NTK singular value is known.
    pub mu_gf: Option<f64>,
}

/// Linear rates of the Gauss-Newton flow and of the gradient flow.
pub fn theory_rates(tc: &TheoryConstants, sigma_w0: Option<f64>) -> Rates {
    let mu_gn = 2.0 * tc.mu / (tc.l_h * (1.0 + tc.alpha / tc.mu_h));
    Rates {
        mu_gn,
        mu_gf: sigma_w0.map(|s| tc.mu * s / 4.0),
    }
}

/// Gradient-norm threshold below which the flow provably never blows up:
/// `(mu mu_H mu_GN / (8 L N)) min(R, 1/C_R) min(sigma0, sigma0^2)`.
pub fn blowup_threshold(tc: &TheoryConstants) -> f64 {
    let mu_gn = theory_rates(tc, None).mu_gn;
    let lead = tc.mu * tc.mu_h * mu_gn / (8.0 * tc.l_smooth * tc.n as f64);
    lead * tc.r.min(1.0 / tc.c_r) * tc.sigma0.min(tc.sigma0 * tc.sigma0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlResidual {
    /// `|grad_v l|^2`
    pub grad_norm_sq: f64,
    /// `2 mu sigma0^2 l(v)`
    pub bound: f64,
    /// `grad_norm_sq - bound`, nonnegative when the inequality holds.
    pub residual: f64,
    pub sigma0_sq: f64,
    pub loss: f64,
}

/// PL residual of `v -> l(v) = L(f_(v, u0))` with `mu = 1/N`.
///
/// The v-gradient is measured in the metric where `d_v f d_v f^T` equals the
/// Gram matrix `G(u0) = Gamma^T Gamma / M`, i.e. the Euclidean gradient
/// rescaled by `1 / (a(M) sqrt(M))`. For NTK scaling that factor is 1; for
/// mean-field scaling it is `sqrt(M)`.
pub fn pl_residual(
    v: &DVector<f64>,
    u0: &DMatrix<f64>,
    act: Activation,
    scaling: Scaling,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<PlResidual> {
    let m = u0.nrows();
    if v.len() != m {
        return Err(Error::dim("linear weights (v length vs M)", m, v.len()));
    }
    let features = feature_matrix(u0, act, x)?;
    let factor = scaling.factor(m);
    let predictions = features.tr_mul(v) * factor;
    let (loss, grad_f) = mse_loss_and_grad(&predictions, y)?;

    let euclidean = &features * &grad_f * factor;
    let metric = 1.0 / (factor * (m as f64).sqrt());
    let grad_norm_sq = (euclidean * metric).norm_squared();

    let mut gram = gram_of_columns(&features) / m as f64;
    symmetrize_from_lower(&mut gram);
    let sigma0_sq = smallest_eigenvalue(&gram)?.max(0.0);
    let bound = 2.0 * mse_strong_convexity(x.nrows()) * sigma0_sq * loss;
    Ok(PlResidual {
        grad_norm_sq,
        bound,
        residual: grad_norm_sq - bound,
        sigma0_sq,
        loss,
    })
}
