//! One-hidden-layer networks `f(x) = a(M) * sum_i v_i * act(u_i . x)` and
//! their closed-form derivatives on a batch.
//!
//! Parameters are flattened as `v` (length `M`) followed by the rows of
//! `u` (each of length `d`), so a parameter vector has `P = M (d + 1)`
//! entries. The Jacobian, the optimizer updates and the on-disk format all
//! use this order.
//!
//! Batches are `N x d` matrices with one sample per row. Hidden features
//! are stored unit-major as `M x N` matrices, `features[(i, n)] =
//! act(u_i . x_n)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_of_columns, symmetrize_from_lower};

/// Point-wise non-linearity of the hidden layer.
///
/// Serialized as `{"kind": "relu"}` or `{"kind": "silu", "beta": 10.0}`;
/// the strings `"relu"`, `"silu"` and `"silu:<beta>"` are accepted too.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "ActivationRepr")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(beta * x)`; approaches ReLU as `beta` grows.
    Silu { beta: f64 },
}

impl Activation {
    pub fn silu(beta: f64) -> Result<Self> {
        let act = Activation::Silu { beta };
        act.validate()?;
        Ok(act)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::Relu => Ok(()),
            Activation::Silu { beta } if beta > 0.0 && beta.is_finite() => Ok(()),
            Activation::Silu { beta } => Err(Error::invalid("activation.beta", format!("SiLU needs beta > 0, got {beta}"))),
        }
    }

    /// Value and derivative at `x`, without input checks.
    ///
    /// The ReLU derivative at exactly 0 is 0.
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Silu { beta } => {
                let s = sigmoid(beta * x);
                (x * s, s + beta * x * s * (1.0 - s))
            }
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::Silu { beta } => x * sigmoid(beta * x),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Activation::Relu => "relu".to_string(),
            Activation::Silu { beta } => format!("silu(beta={beta})"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    /// `relu`, `silu` (beta = 1) or `silu:<beta>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("activation", format!("{s:?}; expected relu, silu or silu:<beta>"));
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "silu" => Activation::silu(1.0),
            other => {
                let beta = other.strip_prefix("silu:").ok_or_else(bad)?;
                Activation::silu(beta.parse().map_err(|_| bad())?)
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ActivationRepr {
    Name(String),
    Tagged(TaggedActivation),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum TaggedActivation {
    Relu,
    Silu { beta: f64 },
}

impl TryFrom<ActivationRepr> for Activation {
    type Error = Error;

    fn try_from(repr: ActivationRepr) -> Result<Self> {
        match repr {
            ActivationRepr::Name(s) => s.parse(),
            ActivationRepr::Tagged(TaggedActivation::Relu) => Ok(Activation::Relu),
            ActivationRepr::Tagged(TaggedActivation::Silu { beta }) => Activation::silu(beta),
        }
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Activation value and derivative, rejecting non-finite input.
pub fn activation(act: Activation, x: f64) -> Result<(f64, f64)> {
    act.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("activation input {x}")));
    }
    Ok(act.eval(x))
}

/// Output scaling factor `a(M)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `a(M) = 1 / M`
    MeanField,
    /// `a(M) = 1 / sqrt(M)`
    Ntk,
}

impl Scaling {
    pub fn factor(self, m: usize) -> f64 {
        match self {
            Scaling::MeanField => 1.0 / m as f64,
            Scaling::Ntk => 1.0 / (m as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    v: DVector<f64>,
    u: DMatrix<f64>,
    scaling: Scaling,
    activation: Activation,
}

impl TwoLayerNet {
    pub fn new(v: DVector<f64>, u: DMatrix<f64>, scaling: Scaling, activation: Activation) -> Result<Self> {
        activation.validate()?;
        if u.nrows() == 0 || u.ncols() == 0 {
            return Err(Error::Empty("hidden weight matrix".into()));
        }
        if v.len() != u.nrows() {
            return Err(Error::dim("linear weights (v length vs M)", u.nrows(), v.len()));
        }
        Ok(TwoLayerNet {
            v,
            u,
            scaling,
            activation,
        })
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.m() * (self.d() + 1)
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_factor(&self) -> f64 {
        self.scaling.factor(self.m())
    }

    pub fn set_v(&mut self, v: DVector<f64>) -> Result<()> {
        if v.len() != self.m() {
            return Err(Error::dim("linear weights (v length vs M)", self.m(), v.len()));
        }
        self.v = v;
        Ok(())
    }

    pub fn with_v(&self, v: DVector<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.set_v(v)?;
        Ok(out)
    }

    /// Flattened parameters: `v` then the rows of `u`.
    pub fn params(&self) -> DVector<f64> {
        let (m, d) = (self.m(), self.d());
        let mut w = DVector::zeros(m * (d + 1));
        w.rows_mut(0, m).copy_from(&self.v);
        for i in 0..m {
            for k in 0..d {
                w[m + i * d + k] = self.u[(i, k)];
            }
        }
        w
    }

    pub fn set_params(&mut self, w: &DVector<f64>) -> Result<()> {
        let (m, d) = (self.m(), self.d());
        if w.len() != m * (d + 1) {
            return Err(Error::dim("flattened parameters", m * (d + 1), w.len()));
        }
        self.v.copy_from(&w.rows(0, m));
        for i in 0..m {
            for k in 0..d {
                self.u[(i, k)] = w[m + i * d + k];
            }
        }
        Ok(())
    }

    /// `w <- w - step * direction` in flattened coordinates.
    pub fn descend(&mut self, direction: &DVector<f64>, step: f64) -> Result<()> {
        let (m, d) = (self.m(), self.d());
        if direction.len() != m * (d + 1) {
            return Err(Error::dim("update direction", m * (d + 1), direction.len()));
        }
        self.v.axpy(-step, &direction.rows(0, m), 1.0);
        for i in 0..m {
            for k in 0..d {
                self.u[(i, k)] -= step * direction[m + i * d + k];
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.d() {
            return Err(Error::dim("input batch columns vs d", self.d(), x.ncols()));
        }
        Ok(())
    }
}

/// Hidden features `act(u_i . x_n)` as an `M x N` matrix.
pub fn feature_matrix(u: &DMatrix<f64>, act: Activation, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    act.validate()?;
    if x.ncols() != u.ncols() {
        return Err(Error::dim("input batch columns vs d", u.ncols(), x.ncols()));
    }
    let mut pre = u * x.transpose();
    pre.apply(|z| *z = act.value(*z));
    Ok(pre)
}

/// Features and their derivatives on a batch, shared by forward, NTK and
/// vector-Jacobian products.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// `act(u_i . x_n)`, `M x N`
    pub features: DMatrix<f64>,
    /// `act'(u_i . x_n)`, `M x N`
    pub derivs: DMatrix<f64>,
    pub predictions: DVector<f64>,
    factor: f64,
}

impl BatchEval {
    pub fn new(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<Self> {
        net.check_batch(x)?;
        let pre = net.u() * x.transpose();
        let act = net.activation();
        let mut features = DMatrix::zeros(pre.nrows(), pre.ncols());
        let mut derivs = DMatrix::zeros(pre.nrows(), pre.ncols());
        for (idx, &z) in pre.iter().enumerate() {
            let (g, dg) = act.eval(z);
            features[idx] = g;
            derivs[idx] = dg;
        }
        let factor = net.output_factor();
        let predictions = features.tr_mul(net.v()) * factor;
        Ok(BatchEval {
            features,
            derivs,
            predictions,
            factor,
        })
    }

    /// NTK matrix from the kernel formula
    /// `a^2 * sum_i [g_i(x) g_i(x') + v_i^2 g'_i(x) g'_i(x') x.x']`.
    pub fn ntk(&self, net: &TwoLayerNet, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = self.derivs.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= net.v()[i];
        }
        let inner = x * x.transpose();
        let mut a = gram_of_columns(&self.features);
        let b = gram_of_columns(&scaled);
        a += b.component_mul(&inner);
        a *= self.factor * self.factor;
        symmetrize_from_lower(&mut a);
        a
    }

    /// `J^T z` without forming `J`.
    pub fn vjp(&self, net: &TwoLayerNet, x: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
        let (m, d) = (net.m(), net.d());
        let mut out = DVector::zeros(m * (d + 1));
        out.rows_mut(0, m).copy_from(&(&self.features * z * self.factor));
        // row i of (G' diag(z)) X, scaled by a * v_i
        let mut weighted = self.derivs.clone();
        for (n, mut col) in weighted.column_iter_mut().enumerate() {
            col *= z[n];
        }
        let grads = weighted * x;
        for i in 0..m {
            let s = self.factor * net.v()[i];
            for k in 0..d {
                out[m + i * d + k] = s * grads[(i, k)];
            }
        }
        out
    }

    /// Dense Jacobian `N x P`.
    pub fn jacobian(&self, net: &TwoLayerNet, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, d) = (net.m(), net.d());
        let n = x.nrows();
        let mut j = DMatrix::zeros(n, m * (d + 1));
        for s in 0..n {
            for i in 0..m {
                j[(s, i)] = self.factor * self.features[(i, s)];
                let c = self.factor * net.v()[i] * self.derivs[(i, s)];
                for k in 0..d {
                    j[(s, m + i * d + k)] = c * x[(s, k)];
                }
            }
        }
        j
    }
}

const FORWARD_BLOCK: usize = 512;

/// Network outputs on every row of `x`.
///
/// Large batches are processed in blocks of rows so the `M x block`
/// feature matrix stays small.
pub fn forward(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    net.check_batch(x)?;
    let n = x.nrows();
    if n <= FORWARD_BLOCK {
        let features = feature_matrix(net.u(), net.activation(), x)?;
        return Ok(features.tr_mul(net.v()) * net.output_factor());
    }
    let mut out = DVector::zeros(n);
    for start in (0..n).step_by(FORWARD_BLOCK) {
        let len = FORWARD_BLOCK.min(n - start);
        let block = x.rows(start, len).into_owned();
        let features = feature_matrix(net.u(), net.activation(), &block)?;
        out.rows_mut(start, len).copy_from(&(features.tr_mul(net.v()) * net.output_factor()));
    }
    Ok(out)
}

/// Jacobian of the outputs w.r.t. the flattened parameters, `N x M(d+1)`.
pub fn jacobian(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(BatchEval::new(net, x)?.jacobian(net, x))
}

/// NTK matrix `A = J J^T` evaluated through the kernel formula, `O(N^2 M)`.
pub fn ntk_matrix(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(BatchEval::new(net, x)?.ntk(net, x))
}

/// NTK matrix through the explicit Jacobian product, `O(N^2 M d)`.
pub fn ntk_matrix_from_jacobian(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let j = jacobian(net, x)?;
    let mut a = &j * j.transpose();
    symmetrize_from_lower(&mut a);
    Ok(a)
}

/// Gram matrix `G = (1/M) Gamma^T Gamma` of the hidden features.
pub fn gram_matrix(u: &DMatrix<f64>, act: Activation, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let features = feature_matrix(u, act, x)?;
    let mut g = gram_of_columns(&features) / u.nrows() as f64;
    symmetrize_from_lower(&mut g);
    Ok(g)
}
