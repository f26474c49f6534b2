use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSource, RunConfig};
use crate::data::{init_student, io::sha256_hex, load_dataset, make_teacher_dataset, save_net, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricTrace, TraceEntry, TraceRecorder};
use crate::model::{forward, TwoLayerNet};
use crate::objective::mse;
use crate::optim::{min_norm_linear_fit, train, LinearFitOptions, Monitor, StopReason};

pub const RECORD_VERSION: u32 = 1;
const TRACE_MAGIC: &[u8; 8] = b"MFGNTRC\0";

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    Diverged,
    SolveFailed,
    /// Random-features closed-form fit.
    ClosedForm,
    /// An error outside the optimizer stopped the run.
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIters => "max_iters",
            RunStatus::Diverged => "diverged",
            RunStatus::SolveFailed => "solve_failed",
            RunStatus::ClosedForm => "closed_form",
            RunStatus::Failed => "failed",
        }
    }

    /// Whether the run's metrics can enter a best-step comparison.
    pub fn usable(self) -> bool {
        matches!(self, RunStatus::Converged | RunStatus::MaxIters | RunStatus::ClosedForm)
    }
}

impl From<StopReason> for RunStatus {
    fn from(r: StopReason) -> Self {
        match r {
            StopReason::Converged => RunStatus::Converged,
            StopReason::MaxIters => RunStatus::MaxIters,
            StopReason::Diverged => RunStatus::Diverged,
            StopReason::SolveFailed => RunStatus::SolveFailed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_lrfit: Option<f64>,
    pub wcd: Option<f64>,
    pub sigma_star_a: Option<f64>,
}

impl From<&TraceEntry> for FinalMetrics {
    fn from(e: &TraceEntry) -> Self {
        FinalMetrics {
            train_loss: e.train_loss,
            test_loss: e.test_loss,
            test_lrfit: e.test_lrfit,
            wcd: e.wcd,
            sigma_star_a: e.sigma_star_a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub teacher: u64,
    pub data: u64,
    pub init: u64,
}

/// Result of one run, written as `<name>.record.json`.
///
/// `train_seconds` and `total_seconds` and the trace's `wall_seconds` are
/// the only fields that differ between two executions of the same config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub config: RunConfig,
    /// `None` when the data came from a file without recorded seeds.
    pub seeds: Option<Seeds>,
    pub dataset_sha256: String,
    pub status: RunStatus,
    pub reached_target: bool,
    pub iterations: usize,
    pub final_metrics: FinalMetrics,
    pub failure: Option<String>,
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub trace: MetricTrace,
}

impl RunRecord {
    /// Copy with every wall-clock field zeroed.
    pub fn without_wall_clock(&self) -> RunRecord {
        let mut r = self.clone();
        r.train_seconds = 0.0;
        r.total_seconds = 0.0;
        for e in &mut r.trace.entries {
            e.wall_seconds = 0.0;
        }
        r
    }

    /// SHA-256 of the canonical JSON of [`Self::without_wall_clock`]. Equal
    /// for repeated executions of the same config on the same build.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(&self.without_wall_clock())?))
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Dataset bytes hash, independent of where the dataset came from.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut bytes = Vec::with_capacity(8 * (ds.x_train.len() + ds.x_test.len() + ds.n_train() + ds.n_test()));
    for m in [&ds.x_train, &ds.x_test] {
        for r in m.row_iter() {
            for x in r.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    for y in ds.y_train.iter().chain(ds.y_test.iter()) {
        bytes.extend_from_slice(&y.to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn build_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Generate {
            teacher,
            n_train,
            n_test,
            data_seed,
        } => make_teacher_dataset(*teacher, *n_train, *n_test, *data_seed),
        DataSource::File { path } => load_dataset(path),
    }
}

/// In-memory result of [`execute`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub net: TwoLayerNet,
}

/// Runs a config without touching the file system (unless the data source
/// is a file).
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let ds = build_dataset(&cfg.data)?;
    execute_on(cfg, &ds)
}

/// Same as [`execute`] on an already built dataset.
pub fn execute_on(cfg: &RunConfig, ds: &Dataset) -> Result<RunOutcome> {
    let start = Instant::now();
    let s = &cfg.student;
    let net0 = init_student(s.init_seed, s.m, ds.d(), s.tau0, s.activation, s.scaling)?;
    let mut recorder = TraceRecorder::new(
        (&ds.x_train, &ds.y_train),
        (&ds.x_test, &ds.y_test),
        Some(ds.teacher.u()),
        cfg.metrics,
    );

    let (net, status, iterations, reached_target, failure, train_seconds) = match cfg.method.optimizer() {
        None => {
            let t0 = Instant::now();
            let fitted = min_norm_linear_fit(net0.u(), s.activation, s.scaling, &ds.x_train, &ds.y_train, &LinearFitOptions::default())
                .and_then(|fit| net0.with_v(fit.v));
            let secs = t0.elapsed().as_secs_f64();
            match fitted {
                Ok(net) => {
                    let loss = mse(&forward(&net, &ds.x_train)?, &ds.y_train);
                    recorder.record(0, secs, &net, loss);
                    (net, RunStatus::ClosedForm, 0, loss < cfg.train.target_loss, None, secs)
                }
                Err(e) => {
                    recorder.record(0, secs, &net0, f64::NAN);
                    (net0, RunStatus::Failed, 0, false, Some(e.to_string()), secs)
                }
            }
        }
        Some(method) => {
            let tc = cfg.train.to_train_config(method);
            match train(&net0, &ds.x_train, &ds.y_train, &tc, &mut recorder) {
                Ok(r) => (r.net, r.stop_reason.into(), r.iterations, r.reached_target, r.failure, r.elapsed),
                Err(e) => (net0, RunStatus::Failed, 0, false, Some(e.to_string()), 0.0),
            }
        }
    };

    let final_metrics = recorder.trace.last().map(FinalMetrics::from).unwrap_or_default();
    let seeds = match &cfg.data {
        DataSource::Generate { teacher, data_seed, .. } => Some(Seeds {
            teacher: teacher.seed,
            data: *data_seed,
            init: s.init_seed,
        }),
        DataSource::File { .. } => None,
    };
    let record = RunRecord {
        format_version: RECORD_VERSION,
        config: cfg.clone(),
        seeds,
        dataset_sha256: dataset_fingerprint(ds),
        status,
        reached_target,
        iterations,
        final_metrics,
        failure,
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        trace: recorder.trace,
    };
    Ok(RunOutcome { record, net })
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub record: PathBuf,
    pub trace: PathBuf,
    pub net: Option<PathBuf>,
}

pub fn run_paths(out_dir: &Path, name: &str) -> RunPaths {
    RunPaths {
        record: out_dir.join(format!("{name}.record.json")),
        trace: out_dir.join(format!("{name}.trace.bin")),
        net: None,
    }
}

/// Executes a config and writes `<name>.record.json`, `<name>.trace.bin`
/// and, with `save_net`, the final network as `<name>.net.*`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<(RunRecord, RunPaths)> {
    let outcome = execute(cfg)?;
    let paths = write_outcome(&outcome, out_dir)?;
    Ok((outcome.record, paths))
}

pub(crate) fn write_outcome(outcome: &RunOutcome, out_dir: &Path) -> Result<RunPaths> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let name = &outcome.record.config.name;
    let mut paths = run_paths(out_dir, name);
    let json = serde_json::to_string_pretty(&outcome.record)?;
    fs::write(&paths.record, json).map_err(|e| Error::io(&paths.record, e))?;
    fs::write(&paths.trace, encode_trace(&outcome.record.trace)).map_err(|e| Error::io(&paths.trace, e))?;
    if outcome.record.config.save_net {
        let base = out_dir.join(format!("{name}.net"));
        save_net(&base, &outcome.net)?;
        paths.net = Some(base);
    }
    Ok(paths)
}

/// Binary trace: `b"MFGNTRC\0"`, u32 version, u64 entry count, then per
/// entry u64 iter and six f64 (wall_seconds, train_loss, test_loss,
/// test_lrfit, wcd, sigma_star_a; NaN marks a missing value), then the
/// SHA-256 of everything before it. Little-endian.
pub fn encode_trace(trace: &MetricTrace) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + trace.len() * 56 + 32);
    buf.extend_from_slice(TRACE_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trace.len() as u64).to_le_bytes());
    for e in &trace.entries {
        buf.extend_from_slice(&(e.iter as u64).to_le_bytes());
        let vals = [e.wall_seconds, opt(e.train_loss), opt(e.test_loss), opt(e.test_lrfit), opt(e.wcd), opt(e.sigma_star_a)];
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn opt(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

fn unopt(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn decode_trace(path: &Path, bytes: &[u8]) -> Result<MetricTrace> {
    let bad = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 + 32 || &bytes[..8] != TRACE_MAGIC {
        return Err(bad("not a trace file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != RECORD_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: RECORD_VERSION,
            found: version,
        });
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_len = count.checked_mul(56).ok_or_else(|| bad("size overflow"))?;
    if bytes.len() != 20 + body_len + 32 {
        return Err(bad("length disagrees with entry count"));
    }
    let split = bytes.len() - 32;
    let computed = sha256_hex(&bytes[..split]);
    let stored = crate::data::io::hex(&bytes[split..]);
    if computed != stored {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: stored,
            computed,
        });
    }
    let mut trace = MetricTrace::default();
    for chunk in bytes[20..split].chunks_exact(56) {
        let f = |k: usize| f64::from_le_bytes(chunk[8 + 8 * k..16 + 8 * k].try_into().unwrap());
        trace.push(TraceEntry {
            iter: u64::from_le_bytes(chunk[..8].try_into().unwrap()) as usize,
            wall_seconds: f(0),
            train_loss: unopt(f(1)),
            test_loss: unopt(f(2)),
            test_lrfit: unopt(f(3)),
            wcd: unopt(f(4)),
            sigma_star_a: unopt(f(5)),
        })?;
    }
    Ok(trace)
}

pub fn read_trace(path: &Path) -> Result<MetricTrace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(path, &bytes)
}
