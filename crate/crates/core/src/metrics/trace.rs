use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{smallest_eig_ntk, test_lrfit, wcd};
use crate::error::{Error, Result};
use crate::model::{forward, TwoLayerNet};
use crate::objective::mse;
use crate::optim::Monitor;

/// Metrics at one logged iteration. `None` marks a value that was not
/// computed or came out non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub wall_seconds: f64,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_lrfit: Option<f64>,
    pub wcd: Option<f64>,
    pub sigma_star_a: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub entries: Vec<TraceEntry>,
}

impl MetricTrace {
    pub fn push(&mut self, entry: TraceEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.iter <= last.iter {
                return Err(Error::invalid("trace", format!("iteration {} after {}", entry.iter, last.iter)));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn first(&self) -> Option<&TraceEntry> {
        self.entries.first()
    }

    pub fn last(&self) -> Option<&TraceEntry> {
        self.entries.last()
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Which metrics a [`TraceRecorder`] evaluates at logged iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSelection {
    pub test_loss: bool,
    pub test_lrfit: bool,
    pub wcd: bool,
    pub sigma_star_a: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection {
            test_loss: true,
            test_lrfit: true,
            wcd: true,
            sigma_star_a: true,
        }
    }
}

/// [`Monitor`] that evaluates the selected metrics and builds a
/// [`MetricTrace`].
pub struct TraceRecorder<'a> {
    pub x_train: &'a DMatrix<f64>,
    pub y_train: &'a DVector<f64>,
    pub x_test: &'a DMatrix<f64>,
    pub y_test: &'a DVector<f64>,
    pub teacher_u: Option<&'a DMatrix<f64>>,
    pub selection: MetricSelection,
    pub trace: MetricTrace,
}

impl<'a> TraceRecorder<'a> {
    pub fn new(
        train: (&'a DMatrix<f64>, &'a DVector<f64>),
        test: (&'a DMatrix<f64>, &'a DVector<f64>),
        teacher_u: Option<&'a DMatrix<f64>>,
        selection: MetricSelection,
    ) -> Self {
        TraceRecorder {
            x_train: train.0,
            y_train: train.1,
            x_test: test.0,
            y_test: test.1,
            teacher_u,
            selection,
            trace: MetricTrace::default(),
        }
    }

    pub fn evaluate(&self, iter: usize, elapsed: f64, net: &TwoLayerNet, train_loss: f64) -> TraceEntry {
        let healthy = train_loss.is_finite() && net.params().iter().all(|p| p.is_finite());
        let sel = self.selection;
        let test_loss = (healthy && sel.test_loss)
            .then(|| forward(net, self.x_test).ok().map(|p| mse(&p, self.y_test)))
            .flatten()
            .and_then(finite);
        let test_lrfit = (healthy && sel.test_lrfit)
            .then(|| {
                test_lrfit(
                    net.u(),
                    net.activation(),
                    net.scaling(),
                    (self.x_train, self.y_train),
                    (self.x_test, self.y_test),
                )
                .ok()
            })
            .flatten()
            .and_then(finite);
        let wcd = match (healthy && sel.wcd, self.teacher_u) {
            (true, Some(t)) => wcd(net.u(), t).ok().and_then(finite),
            _ => None,
        };
        let sigma_star_a = (healthy && sel.sigma_star_a)
            .then(|| smallest_eig_ntk(net, self.x_train).ok())
            .flatten()
            .and_then(finite);
        TraceEntry {
            iter,
            wall_seconds: elapsed,
            train_loss: finite(train_loss),
            test_loss,
            test_lrfit,
            wcd,
            sigma_star_a,
        }
    }
}

impl Monitor for TraceRecorder<'_> {
    fn record(&mut self, iter: usize, elapsed: f64, net: &TwoLayerNet, train_loss: f64) {
        let entry = self.evaluate(iter, elapsed, net, train_loss);
        // the training loop never repeats an iteration; a duplicate would
        // only come from a misuse and is dropped
        if self.trace.push(entry).is_err() {
            log::warn!("dropping out-of-order trace entry at iteration {iter}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(iter: usize) -> TraceEntry {
        TraceEntry {
            iter,
            wall_seconds: 0.0,
            train_loss: Some(1.0),
            test_loss: None,
            test_lrfit: None,
            wcd: None,
            sigma_star_a: None,
        }
    }

    #[test]
    fn iterations_must_increase() {
        let mut t = MetricTrace::default();
        t.push(entry(0)).unwrap();
        t.push(entry(5)).unwrap();
        assert!(t.push(entry(5)).is_err());
        assert!(t.push(entry(3)).is_err());
        assert_eq!(t.len(), 2);
    }
}
