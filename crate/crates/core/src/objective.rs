//! Mean-squared error on the training set and the curvature operators
//! `H` used by the Gauss-Newton update.
//!
//! Function space is `R^N` with the plain Euclidean inner product. In that
//! convention the MSE `(1/2N) |f - y|^2` is `1/N`-strongly convex and
//! `1/N`-smooth.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Choice of the symmetric positive operator `H` in the Gauss-Newton field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// `H = I`
    #[default]
    Identity,
    /// `H = I / N`, the Hessian of the MSE.
    MseHessian,
}

impl HessianMode {
    /// Scalar `h` such that `H = h I` for a batch of size `n`.
    pub fn scalar(self, n: usize) -> f64 {
        match self {
            HessianMode::Identity => 1.0,
            HessianMode::MseHessian => 1.0 / n as f64,
        }
    }

    /// Eigenvalue bounds `(mu_H, L_H)`.
    pub fn bounds(self, n: usize) -> (f64, f64) {
        let h = self.scalar(n);
        (h, h)
    }
}

/// MSE strong-convexity constant (equal to its smoothness constant).
pub fn mse_strong_convexity(n: usize) -> f64 {
    1.0 / n as f64
}

/// `(1/2N) sum (f_n - y_n)^2` and its gradient `(f - y) / N`.
pub fn mse_loss_and_grad(predictions: &DVector<f64>, targets: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::dim("mse targets", predictions.len(), targets.len()));
    }
    if predictions.iter().chain(targets.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mse inputs".into()));
    }
    let n = predictions.len() as f64;
    let resid = predictions - targets;
    let loss = resid.norm_squared() / (2.0 * n);
    Ok((loss, resid / n))
}

/// MSE without the gradient; non-finite inputs give a non-finite loss
/// instead of an error so divergence can be detected by the caller.
pub fn mse(predictions: &DVector<f64>, targets: &DVector<f64>) -> f64 {
    debug_assert_eq!(predictions.len(), targets.len());
    let n = predictions.len().max(1) as f64;
    predictions
        .iter()
        .zip(targets.iter())
        .map(|(f, y)| (f - y) * (f - y))
        .sum::<f64>()
        / (2.0 * n)
}

fn check_len(n: usize, vec: &DVector<f64>) -> Result<()> {
    if vec.len() != n {
        return Err(Error::dim("hessian operand", n, vec.len()));
    }
    Ok(())
}

/// `H vec`
pub fn apply_hessian(mode: HessianMode, n: usize, vec: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(n, vec)?;
    Ok(vec * mode.scalar(n))
}

/// `H^{-1} vec`
pub fn apply_hessian_inv(mode: HessianMode, n: usize, vec: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(n, vec)?;
    Ok(match mode {
        HessianMode::Identity => vec.clone(),
        HessianMode::MseHessian => vec * n as f64,
    })
}

/// `H^{-1/2} vec`
pub fn apply_hessian_inv_sqrt(mode: HessianMode, n: usize, vec: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(n, vec)?;
    Ok(match mode {
        HessianMode::Identity => vec.clone(),
        HessianMode::MseHessian => vec * (n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_residual() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (loss, grad) = mse_loss_and_grad(&y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unit_residuals() {
        let f = DVector::from_vec(vec![1.0, 1.0]);
        let y = DVector::zeros(2);
        let (loss, grad) = mse_loss_and_grad(&f, &y).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn errors() {
        let e = DVector::<f64>::zeros(0);
        assert!(matches!(mse_loss_and_grad(&e, &e), Err(Error::Empty(_))));
        let a = DVector::from_vec(vec![1.0, f64::NAN]);
        let b = DVector::zeros(2);
        assert!(matches!(mse_loss_and_grad(&a, &b), Err(Error::NonFinite(_))));
        assert!(mse_loss_and_grad(&b, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = DVector::from_vec(vec![0.3, -1.1, 2.4, 0.0, 0.7, -0.2, 1.9]);
        let y = DVector::from_vec(vec![1.0, 0.5, -0.5, 0.25, 0.7, 3.0, -1.0]);
        let (_, grad) = mse_loss_and_grad(&f, &y).unwrap();
        let h = 1e-5;
        for n in 0..f.len() {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[n] += h;
            fm[n] -= h;
            let fd = (mse(&fp, &y) - mse(&fm, &y)) / (2.0 * h);
            assert!((fd - grad[n]).abs() <= 1e-8 * grad[n].abs().max(1e-12), "{n}: {fd} vs {}", grad[n]);
        }
    }

    #[test]
    fn hessian_examples() {
        let v = DVector::from_vec(vec![4.0, 0.0, 0.0, 0.0]);
        assert_eq!(apply_hessian(HessianMode::Identity, 4, &v).unwrap(), v);
        assert_eq!(apply_hessian(HessianMode::MseHessian, 4, &v).unwrap().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        for mode in [HessianMode::Identity, HessianMode::MseHessian] {
            let back = apply_hessian_inv(mode, 4, &apply_hessian(mode, 4, &v).unwrap()).unwrap();
            assert_eq!(back, v);
            let half = apply_hessian_inv_sqrt(mode, 4, &apply_hessian_inv_sqrt(mode, 4, &v).unwrap()).unwrap();
            assert!((half - apply_hessian_inv(mode, 4, &v).unwrap()).norm() < 1e-14);
        }
        assert!(apply_hessian(HessianMode::Identity, 3, &v).is_err());
    }

    proptest! {
        #[test]
        fn gradient_norm_equals_twice_mu_loss(r in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let n = r.len();
            let f = DVector::from_vec(r);
            let y = DVector::zeros(n);
            let (loss, grad) = mse_loss_and_grad(&f, &y).unwrap();
            let lhs = grad.norm_squared();
            let rhs = 2.0 * mse_strong_convexity(n) * loss;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(f64::MIN_POSITIVE));
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, f.iter().all(|&x| x == 0.0));
        }
    }
}
