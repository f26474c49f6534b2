use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::damping::{DampingConfig, DampingState};
use super::step::{gd_direction, gn_direction};
use crate::error::{Error, Result};
use crate::model::{BatchEval, TwoLayerNet};
use crate::objective::{mse, HessianMode};

/// Losses above this (or non-finite) end a run as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gn,
    Gd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub step_size: f64,
    pub max_iters: usize,
    /// Success threshold; recorded, not a stop trigger.
    #[serde(default = "default_target_loss")]
    pub target_loss: f64,
    /// Hard stop once the training loss drops below this.
    #[serde(default = "default_stop_loss")]
    pub stop_loss: f64,
    /// Defaults to `max(1, max_iters / 500)`.
    #[serde(default)]
    pub log_every: Option<usize>,
    #[serde(default)]
    pub damping: DampingConfig,
    #[serde(default)]
    pub hessian: HessianMode,
}

fn default_target_loss() -> f64 {
    1e-5
}

fn default_stop_loss() -> f64 {
    1e-7
}

impl TrainConfig {
    pub fn new(method: Method, step_size: f64, max_iters: usize) -> Self {
        TrainConfig {
            method,
            step_size,
            max_iters,
            target_loss: default_target_loss(),
            stop_loss: default_stop_loss(),
            log_every: None,
            damping: DampingConfig::default(),
            hessian: HessianMode::Identity,
        }
    }

    pub fn log_every(&self) -> usize {
        self.log_every.unwrap_or((self.max_iters / 500).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("train.step_size", format!("must be > 0, got {}", self.step_size)));
        }
        if !(self.target_loss > 0.0) {
            return Err(Error::invalid("train.target_loss", "must be > 0"));
        }
        if !(self.stop_loss > 0.0) {
            return Err(Error::invalid("train.stop_loss", "must be > 0"));
        }
        if self.stop_loss > self.target_loss {
            return Err(Error::invalid(
                "train.stop_loss",
                format!("stop_loss {} exceeds target_loss {}", self.stop_loss, self.target_loss),
            ));
        }
        if self.log_every == Some(0) {
            return Err(Error::invalid("train.log_every", "must be >= 1"));
        }
        self.damping.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Training loss fell below `stop_loss`.
    Converged,
    MaxIters,
    Diverged,
    /// The linear solve failed even after the damping retries.
    SolveFailed,
}

/// Callback invoked at logged iterations.
pub trait Monitor {
    /// `elapsed` counts optimizer time only, not time spent in monitors.
    fn record(&mut self, iter: usize, elapsed: f64, net: &TwoLayerNet, train_loss: f64);
}

impl Monitor for () {
    fn record(&mut self, _: usize, _: f64, _: &TwoLayerNet, _: f64) {}
}

/// Loss history at logged iterations, a minimal [`Monitor`].
#[derive(Debug, Default, Clone)]
pub struct LossLog(pub Vec<(usize, f64)>);

impl Monitor for LossLog {
    fn record(&mut self, iter: usize, _: f64, _: &TwoLayerNet, train_loss: f64) {
        self.0.push((iter, train_loss));
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub net: TwoLayerNet,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub train_loss: f64,
    pub reached_target: bool,
    pub elapsed: f64,
    /// Message of the error that ended the run, if any.
    pub failure: Option<String>,
}

/// Runs GN or GD from `net0` until a stop rule fires.
///
/// Stops when the loss drops below `stop_loss`, after `max_iters` updates,
/// or on divergence. The monitor sees iteration 0, every `log_every`-th
/// iteration and the final one.
pub fn train(
    net0: &TwoLayerNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
) -> Result<TrainReport> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::dim("targets vs batch rows", x.nrows(), y.len()));
    }
    let log_every = cfg.log_every();
    let mut net = net0.clone();
    let mut damping = DampingState::new();
    let mut elapsed = 0.0;
    let mut iter = 0usize;
    let mut failure = None;

    let (stop_reason, loss) = loop {
        let t0 = Instant::now();
        let eval = BatchEval::new(&net, x)?;
        let loss = mse(&eval.predictions, y);
        elapsed += t0.elapsed().as_secs_f64();

        let stop = if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            Some(StopReason::Diverged)
        } else if loss < cfg.stop_loss {
            Some(StopReason::Converged)
        } else if iter >= cfg.max_iters {
            Some(StopReason::MaxIters)
        } else {
            None
        };
        if stop.is_some() || iter % log_every == 0 {
            monitor.record(iter, elapsed, &net, loss);
        }
        if let Some(reason) = stop {
            break (reason, loss);
        }

        let t0 = Instant::now();
        let direction = match cfg.method {
            Method::Gn => gn_direction(&net, x, y, &eval, &cfg.damping, cfg.hessian, &mut damping).map(|(d, _)| d),
            Method::Gd => gd_direction(&net, x, y, &eval).map(|(d, _)| d),
        };
        let direction = match direction {
            Ok(d) => d,
            Err(err @ Error::SolveFailure { .. }) => {
                failure = Some(err.to_string());
                monitor.record(iter, elapsed, &net, loss);
                break (StopReason::SolveFailed, loss);
            }
            Err(Error::NonFinite(msg)) => {
                failure = Some(msg);
                monitor.record(iter, elapsed, &net, loss);
                break (StopReason::Diverged, loss);
            }
            Err(e) => return Err(e),
        };
        net.descend(&direction, cfg.step_size)?;
        elapsed += t0.elapsed().as_secs_f64();
        iter += 1;
    };

    Ok(TrainReport {
        net,
        reached_target: loss.is_finite() && loss < cfg.target_loss,
        stop_reason,
        iterations: iter,
        train_loss: loss,
        elapsed,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Activation, Scaling};

    fn setup() -> (TwoLayerNet, DMatrix<f64>, DVector<f64>) {
        let u = DMatrix::from_fn(20, 3, |i, k| ((i * 3 + k) as f64 * 1.37).sin());
        let net = TwoLayerNet::new(DVector::zeros(20), u, Scaling::MeanField, Activation::silu(1.0).unwrap()).unwrap();
        let x = DMatrix::from_fn(6, 3, |n, k| ((n * 7 + k * 2) as f64 * 0.53).cos());
        let y = DVector::from_fn(6, |n, _| ((n as f64) * 1.1).sin());
        (net, x, y)
    }

    #[test]
    fn already_interpolating_returns_immediately() {
        let (net, x, _) = setup();
        let y = forward(&net, &x).unwrap();
        let mut log = LossLog::default();
        let r = train(&net, &x, &y, &TrainConfig::new(Method::Gn, 1.0, 100), &mut log).unwrap();
        assert_eq!(r.stop_reason, StopReason::Converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(log.0, vec![(0, 0.0)]);
        assert!(r.reached_target);
    }

    #[test]
    fn zero_budget_logs_initial_state() {
        let (net, x, y) = setup();
        let mut log = LossLog::default();
        let r = train(&net, &x, &y, &TrainConfig::new(Method::Gd, 1.0, 0), &mut log).unwrap();
        assert_eq!(r.stop_reason, StopReason::MaxIters);
        assert_eq!(r.iterations, 0);
        assert_eq!(log.0.len(), 1);
        assert_eq!(r.net, net);
    }

    #[test]
    fn gn_converges_and_logs_final_iteration() {
        let (net, x, y) = setup();
        let mut cfg = TrainConfig::new(Method::Gn, 2.0, 10_000);
        cfg.log_every = Some(7);
        cfg.damping.alpha = 0.0;
        cfg.damping.floor = 1e-12;
        let mut log = LossLog::default();
        let r = train(&net, &x, &y, &cfg, &mut log).unwrap();
        assert_eq!(r.stop_reason, StopReason::Converged);
        assert!(r.train_loss < 1e-7);
        let iters: Vec<usize> = log.0.iter().map(|e| e.0).collect();
        assert_eq!(*iters.last().unwrap(), r.iterations);
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        assert!(iters[..iters.len() - 1].iter().all(|i| i % 7 == 0));
    }

    #[test]
    fn huge_gd_step_diverges() {
        let (net, x, y) = setup();
        let r = train(&net, &x, &y, &TrainConfig::new(Method::Gd, 1e9, 1000), &mut ()).unwrap();
        assert_eq!(r.stop_reason, StopReason::Diverged);
        assert!(!r.reached_target);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Method::Gd, 0.0, 10);
        assert!(cfg.validate().is_err());
        cfg.step_size = 1.0;
        cfg.stop_loss = 1e-3;
        assert!(cfg.validate().is_err());
        cfg.stop_loss = 1e-7;
        assert!(cfg.validate().is_ok());
        assert_eq!(TrainConfig::new(Method::Gd, 1.0, 100_000).log_every(), 200);
        assert_eq!(TrainConfig::new(Method::Gd, 1.0, 10).log_every(), 1);
    }
}
