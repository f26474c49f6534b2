//! Discrete Gauss-Newton and gradient-descent updates, damping, the
//! minimum-norm linear solve, and the training loop.

mod damping;
mod fit;
mod step;
mod train;

pub use damping::{damping_value, Damping, DampingConfig, DampingState};
pub use fit::{min_norm_linear_fit, LinearFit, LinearFitOptions};
pub use step::{gd_direction, gd_step, gn_direction, gn_step, gn_vector_field, parameter_gradient, GnDiagnostics};
pub use train::{train, LossLog, Method, Monitor, StopReason, TrainConfig, TrainReport, DIVERGENCE_LOSS};
