use nalgebra::{Cholesky, DMatrix, DVector};

use super::damping::{DampingConfig, DampingState};
use crate::error::{Error, Result};
use crate::model::{BatchEval, TwoLayerNet};
use crate::objective::{mse_loss_and_grad, HessianMode};

/// Extra factorization attempts, each with the damping multiplied by 10.
const SOLVE_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnDiagnostics {
    /// Damping actually used in the solve (after any retries).
    pub epsilon: f64,
    pub sigma2: Option<f64>,
    /// `|f(w) - y|` before the step.
    pub residual_norm: f64,
    /// Training loss before the step.
    pub loss: f64,
    pub retries: usize,
}

/// Gauss-Newton direction `Phi = J^T (A + eps H^{-1})^{-1} H^{-1} grad`
/// computed from an existing batch evaluation. `A` is never larger than
/// `N x N`.
pub fn gn_direction(
    net: &TwoLayerNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    eval: &BatchEval,
    damping: &DampingConfig,
    hessian: HessianMode,
    state: &mut DampingState,
) -> Result<(DVector<f64>, GnDiagnostics)> {
    let n = x.nrows();
    let (loss, grad) = mse_loss_and_grad(&eval.predictions, y)?;
    let a = eval.ntk(net, x);
    let damp = state.update(&a, damping)?;

    // H = h I, so H^{-1} = I / h.
    let h_inv = 1.0 / hessian.scalar(n);
    let rhs = &grad * h_inv;
    let mut epsilon = damp.epsilon;
    let mut retries = 0;
    let z = loop {
        let mut system = a.clone();
        for i in 0..n {
            system[(i, i)] += epsilon * h_inv;
        }
        if let Some(chol) = Cholesky::new(system) {
            break chol.solve(&rhs);
        }
        if retries == SOLVE_RETRIES {
            return Err(Error::SolveFailure {
                sigma2: damp.sigma2.unwrap_or(f64::NAN),
                epsilon,
            });
        }
        retries += 1;
        log::warn!("Cholesky factorization failed with damping {epsilon:e}; retrying with {:e}", epsilon * 10.0);
        epsilon *= 10.0;
    };
    let phi = eval.vjp(net, x, &z);
    if phi.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("Gauss-Newton update".into()));
    }
    let diag = GnDiagnostics {
        epsilon,
        sigma2: damp.sigma2,
        residual_norm: (2.0 * n as f64 * loss).sqrt(),
        loss,
        retries,
    };
    Ok((phi, diag))
}

/// Full-batch gradient `J^T grad L` from an existing batch evaluation.
pub fn gd_direction(net: &TwoLayerNet, x: &DMatrix<f64>, y: &DVector<f64>, eval: &BatchEval) -> Result<(DVector<f64>, f64)> {
    let (loss, grad) = mse_loss_and_grad(&eval.predictions, y)?;
    let g = eval.vjp(net, x, &grad);
    if g.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((g, loss))
}

/// One discrete Gauss-Newton update `w - step * Phi(w)` with a fresh
/// damping computation.
pub fn gn_step(
    net: &TwoLayerNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    step_size: f64,
    damping: &DampingConfig,
    hessian: HessianMode,
) -> Result<(TwoLayerNet, GnDiagnostics)> {
    damping.validate()?;
    check_targets(x, y)?;
    let eval = BatchEval::new(net, x)?;
    let (phi, diag) = gn_direction(net, x, y, &eval, damping, hessian, &mut DampingState::new())?;
    let mut next = net.clone();
    next.descend(&phi, step_size)?;
    Ok((next, diag))
}

/// One gradient-descent update `w - step * J^T grad L`.
pub fn gd_step(net: &TwoLayerNet, x: &DMatrix<f64>, y: &DVector<f64>, step_size: f64) -> Result<TwoLayerNet> {
    check_targets(x, y)?;
    let eval = BatchEval::new(net, x)?;
    let (g, _) = gd_direction(net, x, y, &eval)?;
    let mut next = net.clone();
    next.descend(&g, step_size)?;
    if next.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("gradient-descent update".into()));
    }
    Ok(next)
}

/// Gradient of `w -> L(f_w)` in flattened coordinates.
pub fn parameter_gradient(net: &TwoLayerNet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_targets(x, y)?;
    let eval = BatchEval::new(net, x)?;
    Ok(gd_direction(net, x, y, &eval)?.0)
}

/// Gauss-Newton direction at `net` with a fresh damping computation.
pub fn gn_vector_field(
    net: &TwoLayerNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    damping: &DampingConfig,
    hessian: HessianMode,
) -> Result<(DVector<f64>, GnDiagnostics)> {
    damping.validate()?;
    check_targets(x, y)?;
    let eval = BatchEval::new(net, x)?;
    gn_direction(net, x, y, &eval, damping, hessian, &mut DampingState::new())
}

fn check_targets(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::dim("targets vs batch rows", x.nrows(), y.len()));
    }
    Ok(())
}
