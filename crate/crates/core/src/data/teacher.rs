use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::rng::gaussian_matrix;
use crate::error::{Error, Result};
use crate::model::{forward, Activation, Scaling, TwoLayerNet};

pub const STREAM_TEACHER_U: &str = "teacher-u";
pub const STREAM_TEACHER_V: &str = "teacher-v";
pub const STREAM_TRAIN: &str = "data-train";
pub const STREAM_TEST: &str = "data-test";
pub const STREAM_STUDENT_U: &str = "student-u";

/// Output scaling of the teacher network. Recorded in every dataset
/// manifest.
pub const TEACHER_SCALING: Scaling = Scaling::MeanField;

fn default_d() -> usize {
    10
}

fn default_m_star() -> usize {
    5
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_m_star")]
    pub m_star: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            d: default_d(),
            m_star: default_m_star(),
            activation: default_activation(),
            seed: 0,
        }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("teacher.d", "must be >= 1"));
        }
        if self.m_star == 0 {
            return Err(Error::invalid("teacher.m_star", "must be >= 1"));
        }
        self.activation.validate()
    }

    /// Teacher with standard Gaussian hidden and output weights.
    pub fn build(&self) -> Result<TwoLayerNet> {
        self.validate()?;
        let u = gaussian_matrix(self.seed, STREAM_TEACHER_U, self.m_star, self.d, 1.0);
        let v = gaussian_matrix(self.seed, STREAM_TEACHER_V, self.m_star, 1, 1.0).column(0).into_owned();
        TwoLayerNet::new(v, u, TEACHER_SCALING, self.activation)
    }
}

/// Train and test splits labelled by a teacher network.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub teacher_spec: TeacherSpec,
    pub data_seed: u64,
    pub teacher: TwoLayerNet,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    /// Number of times the training inputs were redrawn because two rows
    /// coincided.
    pub redraws: u32,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn d(&self) -> usize {
        self.x_train.ncols()
    }
}

pub const DEFAULT_N_TRAIN: usize = 500;
pub const DEFAULT_N_TEST: usize = 10_000;

pub(crate) fn has_duplicate_rows(x: &DMatrix<f64>) -> bool {
    let mut rows: Vec<Vec<u64>> = x.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.windows(2).any(|w| w[0] == w[1])
}

fn train_stream(redraw: u32) -> String {
    if redraw == 0 {
        STREAM_TRAIN.to_string()
    } else {
        format!("{STREAM_TRAIN}/redraw-{redraw}")
    }
}

/// Draws `N` training and `N_test` test inputs from a standard Gaussian and
/// labels them with the teacher. Training inputs are redrawn from a fresh
/// stream if two rows coincide.
pub fn make_teacher_dataset(spec: TeacherSpec, n_train: usize, n_test: usize, data_seed: u64) -> Result<Dataset> {
    if n_train == 0 {
        return Err(Error::invalid("n_train", "must be >= 1"));
    }
    let teacher = spec.build()?;
    let mut redraws = 0;
    let x_train = loop {
        let x = gaussian_matrix(data_seed, &train_stream(redraws), n_train, spec.d, 1.0);
        if !has_duplicate_rows(&x) {
            break x;
        }
        redraws += 1;
        if redraws > 16 {
            return Err(Error::DegenerateWeights("training inputs keep colliding".into()));
        }
    };
    let x_test = gaussian_matrix(data_seed, STREAM_TEST, n_test, spec.d, 1.0);
    let y_train = forward(&teacher, &x_train)?;
    let y_test = if n_test == 0 { DVector::zeros(0) } else { forward(&teacher, &x_test)? };
    Ok(Dataset {
        teacher_spec: spec,
        data_seed,
        teacher,
        x_train,
        y_train,
        x_test,
        y_test,
        redraws,
    })
}

pub const DEFAULT_STUDENT_WIDTH: usize = 5000;

/// Student at initialization: `u ~ Normal(0, tau0^2)` entrywise, `v = 0`.
pub fn init_student(seed: u64, m: usize, d: usize, tau0: f64, act: Activation, scaling: Scaling) -> Result<TwoLayerNet> {
    if m == 0 {
        return Err(Error::invalid("student.m", "must be >= 1"));
    }
    if !(tau0 >= 0.0 && tau0.is_finite()) {
        return Err(Error::invalid("student.tau0", format!("must be finite and >= 0, got {tau0}")));
    }
    let u = gaussian_matrix(seed, STREAM_STUDENT_U, m, d, tau0);
    TwoLayerNet::new(DVector::zeros(m), u, scaling, act)
}

/// Width-`m` student that computes exactly the same function as a
/// mean-field `teacher`: the teacher units are copied into the first rows,
/// their output weights rescaled so the `1/M` factors match, and the rest
/// zeroed.
pub fn embed_teacher(teacher: &TwoLayerNet, m: usize, scaling: Scaling) -> Result<TwoLayerNet> {
    let m_star = teacher.m();
    if m < m_star {
        return Err(Error::dim("student width (at least M*)", m_star, m));
    }
    let mut u = DMatrix::zeros(m, teacher.d());
    u.rows_mut(0, m_star).copy_from(teacher.u());
    let ratio = teacher.output_factor() / scaling.factor(m);
    let mut v = DVector::zeros(m);
    v.rows_mut(0, m_star).copy_from(&(teacher.v() * ratio));
    TwoLayerNet::new(v, u, scaling, teacher.activation())
}
