use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{smallest_eigenpair_inverse_iteration, smallest_eigenvalue, FULL_EIGEN_LIMIT};
use crate::model::{ntk_matrix, TwoLayerNet};

/// Damping `eps(w) = max(alpha * sigma2(w), floor)` where `sigma2(w)` is the
/// smallest eigenvalue of the NTK matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DampingConfig {
    pub alpha: f64,
    pub floor: f64,
    /// Iterations between fresh `sigma2` computations.
    pub recompute_every: usize,
}

impl Default for DampingConfig {
    fn default() -> Self {
        DampingConfig {
            alpha: 1.0,
            floor: 1e-7,
            recompute_every: 1,
        }
    }
}

impl DampingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("damping.alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return Err(Error::invalid("damping.floor", format!("must be > 0, got {}", self.floor)));
        }
        if self.recompute_every == 0 {
            return Err(Error::invalid("damping.recompute_every", "must be >= 1"));
        }
        Ok(())
    }

    /// `max(alpha * sigma2, floor)`
    pub fn epsilon(&self, sigma2: f64) -> f64 {
        (self.alpha * sigma2).max(self.floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Damping {
    pub epsilon: f64,
    /// `None` when `alpha = 0` and no eigenvalue was needed.
    pub sigma2: Option<f64>,
}

/// Damping at `net`, reusing `cached_sigma2` when given.
pub fn damping_value(net: &TwoLayerNet, x: &DMatrix<f64>, cfg: &DampingConfig, cached_sigma2: Option<f64>) -> Result<Damping> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return Ok(Damping {
            epsilon: cfg.floor,
            sigma2: cached_sigma2,
        });
    }
    let sigma2 = match cached_sigma2 {
        Some(s) => s,
        None => smallest_eigenvalue(&ntk_matrix(net, x)?)?.max(0.0),
    };
    Ok(Damping {
        epsilon: cfg.epsilon(sigma2),
        sigma2: Some(sigma2),
    })
}

/// Per-run damping state: the cached eigenvalue, the eigenvector used to
/// warm-start inverse iteration on large systems, and the refresh counter.
#[derive(Debug, Clone, Default)]
pub struct DampingState {
    sigma2: Option<f64>,
    eigvec: Option<DVector<f64>>,
    age: usize,
}

impl DampingState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Damping for the NTK matrix `a` of the current iterate.
    pub fn update(&mut self, a: &DMatrix<f64>, cfg: &DampingConfig) -> Result<Damping> {
        if cfg.alpha == 0.0 {
            return Ok(Damping {
                epsilon: cfg.floor,
                sigma2: None,
            });
        }
        let stale = self.sigma2.is_none() || self.age >= cfg.recompute_every;
        if stale {
            let sigma2 = if a.nrows() <= FULL_EIGEN_LIMIT {
                smallest_eigenvalue(a)?
            } else {
                let pair = smallest_eigenpair_inverse_iteration(a, self.eigvec.as_ref(), 1e-6, 500)?;
                self.eigvec = Some(pair.vector);
                pair.value
            };
            self.sigma2 = Some(sigma2.max(0.0));
            self.age = 0;
        }
        self.age += 1;
        let sigma2 = self.sigma2.unwrap_or(0.0);
        Ok(Damping {
            epsilon: cfg.epsilon(sigma2),
            sigma2: Some(sigma2),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Scaling};

    fn small_net() -> (TwoLayerNet, DMatrix<f64>) {
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 1.2, 0.8, -0.9]);
        let v = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let net = TwoLayerNet::new(v, u, Scaling::MeanField, Activation::silu(1.0).unwrap()).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, -1.0]);
        (net, x)
    }

    #[test]
    fn epsilon_examples() {
        let cfg = DampingConfig { alpha: 1.0, floor: 1e-7, recompute_every: 1 };
        assert_eq!(cfg.epsilon(1e-3), 1e-3);
        assert_eq!(cfg.epsilon(0.0), 1e-7);
        let (net, x) = small_net();
        let d = damping_value(&net, &x, &cfg, Some(0.0)).unwrap();
        assert_eq!(d.epsilon, 1e-7);
        let d = damping_value(&net, &x, &cfg, Some(1e-3)).unwrap();
        assert_eq!(d.epsilon, 1e-3);
    }

    #[test]
    fn zero_alpha_uses_floor() {
        let (net, x) = small_net();
        let cfg = DampingConfig { alpha: 0.0, floor: 1e-9, recompute_every: 1 };
        let d = damping_value(&net, &x, &cfg, None).unwrap();
        assert_eq!(d.epsilon, 1e-9);
        assert_eq!(d.sigma2, None);
    }

    #[test]
    fn fresh_sigma2_matches_eigenvalue() {
        let (net, x) = small_net();
        let cfg = DampingConfig { alpha: 2.0, ..Default::default() };
        let a = ntk_matrix(&net, &x).unwrap();
        let s = smallest_eigenvalue(&a).unwrap();
        let d = damping_value(&net, &x, &cfg, None).unwrap();
        assert_eq!(d.sigma2, Some(s));
        assert_eq!(d.epsilon, (2.0 * s).max(1e-7));
    }

    #[test]
    fn state_reuses_value_between_refreshes() {
        let (net, x) = small_net();
        let a = ntk_matrix(&net, &x).unwrap();
        let cfg = DampingConfig { alpha: 1.0, floor: 1e-12, recompute_every: 3 };
        let mut st = DampingState::new();
        let first = st.update(&a, &cfg).unwrap();
        let scaled = &a * 4.0;
        assert_eq!(st.update(&scaled, &cfg).unwrap(), first);
        assert_eq!(st.update(&scaled, &cfg).unwrap(), first);
        let fresh = st.update(&scaled, &cfg).unwrap();
        assert!((fresh.sigma2.unwrap() - 4.0 * first.sigma2.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        assert!(DampingConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(DampingConfig { floor: 0.0, ..Default::default() }.validate().is_err());
        assert!(DampingConfig { recompute_every: 0, ..Default::default() }.validate().is_err());
    }
}
