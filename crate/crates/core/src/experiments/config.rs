use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{TeacherSpec, DEFAULT_N_TEST, DEFAULT_N_TRAIN, DEFAULT_STUDENT_WIDTH};
use crate::error::{Error, Result};
use crate::metrics::MetricSelection;
use crate::model::{Activation, Scaling};
use crate::objective::HessianMode;
use crate::optim::{DampingConfig, Method, TrainConfig};

/// Default output directory when neither `--out-dir` nor the environment
/// variable is set.
pub const DEFAULT_OUT_DIR: &str = "runs";
pub const OUT_DIR_ENV: &str = "MFGN_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMethod {
    Gn,
    Gd,
    /// Random features: closed-form fit of the linear layer only.
    Rf,
}

impl RunMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMethod::Gn => "gn",
            RunMethod::Gd => "gd",
            RunMethod::Rf => "rf",
        }
    }

    pub fn optimizer(self) -> Option<Method> {
        match self {
            RunMethod::Gn => Some(Method::Gn),
            RunMethod::Gd => Some(Method::Gd),
            RunMethod::Rf => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Generate {
        #[serde(default)]
        teacher: TeacherSpec,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default)]
        data_seed: u64,
    },
    /// A dataset written by `gen-data`; `path` is the artifact base name.
    File { path: PathBuf },
}

fn default_n_train() -> usize {
    DEFAULT_N_TRAIN
}

fn default_n_test() -> usize {
    DEFAULT_N_TEST
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generate {
            teacher: TeacherSpec::default(),
            n_train: DEFAULT_N_TRAIN,
            n_test: DEFAULT_N_TEST,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub m: usize,
    pub tau0: f64,
    pub init_seed: u64,
    pub activation: Activation,
    pub scaling: Scaling,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            m: DEFAULT_STUDENT_WIDTH,
            tau0: 1.0,
            init_seed: 0,
            activation: Activation::Relu,
            scaling: Scaling::MeanField,
        }
    }
}

/// Optimizer settings of a run; the method comes from the run itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub step_size: f64,
    pub max_iters: usize,
    pub target_loss: f64,
    pub stop_loss: f64,
    pub log_every: Option<usize>,
    pub damping: DampingConfig,
    pub hessian: HessianMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::new(Method::Gn, 1.0, 1000);
        TrainSettings {
            step_size: t.step_size,
            max_iters: t.max_iters,
            target_loss: t.target_loss,
            stop_loss: t.stop_loss,
            log_every: t.log_every,
            damping: t.damping,
            hessian: t.hessian,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            step_size: self.step_size,
            max_iters: self.max_iters,
            target_loss: self.target_loss,
            stop_loss: self.stop_loss,
            log_every: self.log_every,
            damping: self.damping.clone(),
            hessian: self.hessian,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub method: RunMethod,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub metrics: MetricSelection,
    /// Also write the final network next to the record.
    #[serde(default)]
    pub save_net: bool,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidValue { field, reason } => Error::Config { field, reason },
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config {
                field: "name".into(),
                reason: format!("{:?} is not a usable file name", self.name),
            });
        }
        if let DataSource::Generate { teacher, n_train, .. } = &self.data {
            teacher.validate().map_err(config_err)?;
            if *n_train == 0 {
                return Err(Error::Config {
                    field: "data.n_train".into(),
                    reason: "must be >= 1".into(),
                });
            }
        }
        let s = &self.student;
        if s.m == 0 {
            return Err(Error::Config {
                field: "student.m".into(),
                reason: "must be >= 1".into(),
            });
        }
        if !(s.tau0 >= 0.0 && s.tau0.is_finite()) {
            return Err(Error::Config {
                field: "student.tau0".into(),
                reason: format!("must be finite and >= 0, got {}", s.tau0),
            });
        }
        s.activation.validate().map_err(config_err)?;
        if let Some(method) = self.method.optimizer() {
            self.train.to_train_config(method).validate().map_err(config_err)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<file>".into(),
            reason: e.to_string(),
        })?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config {
            field: "<file>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value` overrides and re-validates.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// `(teacher, data, init)` seeds, with `None` for data read from a file.
    pub fn seeds(&self) -> (Option<u64>, Option<u64>, u64) {
        match &self.data {
            DataSource::Generate { teacher, data_seed, .. } => (Some(teacher.seed), Some(*data_seed), self.student.init_seed),
            DataSource::File { .. } => (None, None, self.student.init_seed),
        }
    }
}

/// Sets `path` (dot-separated) in a JSON object to `raw`, parsed as JSON
/// when possible and taken as a string otherwise. Missing intermediate
/// objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        field: assignment.into(),
        reason: "override must look like key.path=value".into(),
    })?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config {
            field: path.into(),
            reason: "empty key in override path".into(),
        });
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config {
            field: path.into(),
            reason: format!("{key} is not inside an object"),
        })?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    let obj = node.as_object_mut().ok_or_else(|| Error::Config {
        field: path.into(),
        reason: "parent is not an object".into(),
    })?;
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses `relu`, `silu` (beta = 1) or `silu:<beta>`.
pub fn parse_activation(s: &str) -> Result<Activation> {
    s.parse().map_err(config_err)
}

/// File-name friendly activation tag: `relu`, `silu-b10`.
pub fn activation_slug(act: Activation) -> String {
    match act {
        Activation::Relu => "relu".into(),
        Activation::Silu { beta } => format!("silu-b{beta}"),
    }
}
