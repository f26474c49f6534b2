use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{activation_slug, DataSource, RunConfig, RunMethod};
use super::run::{execute, write_outcome, RunRecord, RunStatus};
use crate::error::{Error, Result};
use crate::model::Activation;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BEST_FILE: &str = "best.csv";
pub const SWEEP_FILE: &str = "sweep.json";
pub const RUNS_DIR: &str = "runs";

/// A grid of runs around a base config.
///
/// Each seed `s` sets the teacher seed, the data seed and the student init
/// seed. Each activation sets both the teacher's and the student's
/// non-linearity (when the base config generates its data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    pub base: RunConfig,
    pub methods: Vec<RunMethod>,
    pub tau0_grid: Vec<f64>,
    #[serde(default)]
    pub step_grid: Vec<f64>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub m_grid: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub activations: Vec<Activation>,
    /// Iteration budgets; fall back to `base.train.max_iters`.
    #[serde(default)]
    pub gn_max_iters: Option<usize>,
    #[serde(default)]
    pub gd_max_iters: Option<usize>,
}

/// Inclusive logarithmic grid `10^lo, 10^(lo+1), ..., 10^hi`.
pub fn log10_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| format!("1e{k}").parse().unwrap()).collect()
}

fn fmt_g(x: f64) -> String {
    format!("{x:e}")
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SweepSpec = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "<sweep file>".into(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, reason: &str| Error::Config {
            field: field.into(),
            reason: reason.into(),
        };
        if self.methods.is_empty() {
            return Err(cfg("methods", "must not be empty"));
        }
        if self.tau0_grid.is_empty() {
            return Err(cfg("tau0_grid", "must not be empty"));
        }
        if self.methods.iter().any(|m| *m != RunMethod::Rf) && self.step_grid.is_empty() {
            return Err(cfg("step_grid", "must not be empty when GN or GD is swept"));
        }
        if !self.n_grid.is_empty() && matches!(self.base.data, DataSource::File { .. }) {
            return Err(cfg("n_grid", "cannot vary N when the base config reads its data from a file"));
        }
        if !self.activations.is_empty() && matches!(self.base.data, DataSource::File { .. }) {
            return Err(cfg("activations", "cannot vary the teacher when the base config reads its data from a file"));
        }
        self.base.validate()?;
        for c in self.expand() {
            c.validate()?;
        }
        Ok(())
    }

    /// Every run config of the grid, in a fixed order. RF runs ignore the
    /// step grid and the budgets.
    pub fn expand(&self) -> Vec<RunConfig> {
        let base = &self.base;
        let acts = if self.activations.is_empty() { vec![base.student.activation] } else { self.activations.clone() };
        let ns: Vec<Option<usize>> = if self.n_grid.is_empty() { vec![None] } else { self.n_grid.iter().map(|&n| Some(n)).collect() };
        let ms = if self.m_grid.is_empty() { vec![base.student.m] } else { self.m_grid.clone() };
        let seeds: Vec<Option<u64>> = if self.seeds.is_empty() { vec![None] } else { self.seeds.iter().map(|&s| Some(s)).collect() };

        let mut out = Vec::new();
        for &method in &self.methods {
            let steps: Vec<Option<f64>> = match method {
                RunMethod::Rf => vec![None],
                _ => self.step_grid.iter().map(|&s| Some(s)).collect(),
            };
            for &act in &acts {
                for &tau0 in &self.tau0_grid {
                    for &step in &steps {
                        for &n in &ns {
                            for &m in &ms {
                                for &seed in &seeds {
                                    let mut c = base.clone();
                                    c.method = method;
                                    c.student.activation = act;
                                    c.student.tau0 = tau0;
                                    c.student.m = m;
                                    if let Some(s) = step {
                                        c.train.step_size = s;
                                    }
                                    match method {
                                        RunMethod::Gn => c.train.max_iters = self.gn_max_iters.unwrap_or(c.train.max_iters),
                                        RunMethod::Gd => c.train.max_iters = self.gd_max_iters.unwrap_or(c.train.max_iters),
                                        RunMethod::Rf => {}
                                    }
                                    if let DataSource::Generate { teacher, n_train, data_seed, .. } = &mut c.data {
                                        if !self.activations.is_empty() {
                                            teacher.activation = act;
                                        }
                                        if let Some(n) = n {
                                            *n_train = n;
                                        }
                                        if let Some(s) = seed {
                                            teacher.seed = s;
                                            *data_seed = s;
                                        }
                                    }
                                    if let Some(s) = seed {
                                        c.student.init_seed = s;
                                    }
                                    c.name = run_name(&self.name, &c);
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn n_train_of(c: &RunConfig) -> Option<usize> {
    match &c.data {
        DataSource::Generate { n_train, .. } => Some(*n_train),
        DataSource::File { .. } => None,
    }
}

/// `<sweep>-<method>-<act>-tau<τ0>[-lr<λ>]-n<N>-m<M>-s<seed>`.
pub fn run_name(sweep: &str, c: &RunConfig) -> String {
    let mut name = format!("{sweep}-{}-{}-tau{}", c.method.as_str(), activation_slug(c.student.activation), fmt_g(c.student.tau0));
    if c.method != RunMethod::Rf {
        name.push_str(&format!("-lr{}", fmt_g(c.train.step_size)));
    }
    if let Some(n) = n_train_of(c) {
        name.push_str(&format!("-n{n}"));
    }
    name.push_str(&format!("-m{}-s{}", c.student.m, c.student.init_seed));
    name
}

/// One line of `summary.csv`. No wall-clock columns, so the file is the
/// same for any parallelism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    /// Empty for RF.
    pub step_size: Option<f64>,
    pub n: Option<usize>,
    pub m: usize,
    pub seed: u64,
    pub status: String,
    pub iterations: usize,
    pub reached_target: bool,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_lrfit: Option<f64>,
    pub wcd: Option<f64>,
    pub sigma_star_a: Option<f64>,
    /// [`RunRecord::fingerprint`] of the record, empty when the run could
    /// not even start.
    pub record_sha256: String,
    pub failure: String,
}

impl SummaryRow {
    pub fn from_record(r: &RunRecord) -> Result<Self> {
        let c = &r.config;
        Ok(SummaryRow {
            run: c.name.clone(),
            method: c.method,
            activation: activation_slug(c.student.activation),
            tau0: c.student.tau0,
            step_size: (c.method != RunMethod::Rf).then_some(c.train.step_size),
            n: n_train_of(c),
            m: c.student.m,
            seed: c.student.init_seed,
            status: r.status.as_str().into(),
            iterations: r.iterations,
            reached_target: r.reached_target,
            train_loss: r.final_metrics.train_loss,
            test_loss: r.final_metrics.test_loss,
            test_lrfit: r.final_metrics.test_lrfit,
            wcd: r.final_metrics.wcd,
            sigma_star_a: r.final_metrics.sigma_star_a,
            record_sha256: r.fingerprint()?,
            failure: r.failure.clone().unwrap_or_default(),
        })
    }

    fn errored(c: &RunConfig, err: &Error) -> Self {
        SummaryRow {
            run: c.name.clone(),
            method: c.method,
            activation: activation_slug(c.student.activation),
            tau0: c.student.tau0,
            step_size: (c.method != RunMethod::Rf).then_some(c.train.step_size),
            n: n_train_of(c),
            m: c.student.m,
            seed: c.student.init_seed,
            status: "error".into(),
            iterations: 0,
            reached_target: false,
            train_loss: None,
            test_loss: None,
            test_lrfit: None,
            wcd: None,
            sigma_star_a: None,
            record_sha256: String::new(),
            failure: err.to_string(),
        }
    }

    pub fn usable(&self) -> bool {
        status_usable(&self.status)
    }

    /// Cell key for best-step selection.
    pub fn cell(&self) -> CellKey {
        CellKey {
            method: self.method,
            activation: self.activation.clone(),
            tau0: OrdF64(self.tau0),
            n: self.n,
            m: self.m,
            seed: self.seed,
        }
    }
}

/// Total order wrapper for grid values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub method: RunMethod,
    pub activation: String,
    pub tau0: OrdF64,
    pub n: Option<usize>,
    pub m: usize,
    pub seed: u64,
}

fn sort_rows(rows: &mut [SummaryRow]) {
    rows.sort_by(|a, b| {
        a.cell()
            .cmp(&b.cell())
            .then(a.step_size.unwrap_or(0.0).total_cmp(&b.step_size.unwrap_or(0.0)))
            .then(a.run.cmp(&b.run))
    });
}

/// Best step size of one `(method, activation, tau0, N, M, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    pub n: Option<usize>,
    pub m: usize,
    pub seed: u64,
    pub best_step_by_test_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub best_step_by_test_lrfit: Option<f64>,
    pub test_lrfit: Option<f64>,
    /// WCD and NTK eigenvalue of the run chosen by test loss.
    pub wcd: Option<f64>,
    pub sigma_star_a: Option<f64>,
    pub runs: usize,
    pub failed_runs: usize,
    /// Every run of the cell failed.
    pub failed_cell: bool,
}

/// Argmin by `key` over usable rows; ties go to the smaller step size.
fn argmin<'a>(rows: &[&'a SummaryRow], key: impl Fn(&SummaryRow) -> Option<f64>) -> Option<&'a SummaryRow> {
    let mut best: Option<(&SummaryRow, f64)> = None;
    for r in rows.iter().copied().filter(|r| r.usable()) {
        let Some(k) = key(r).filter(|k| k.is_finite()) else { continue };
        let better = match best {
            None => true,
            Some((b, bk)) => k < bk || (k == bk && r.step_size.unwrap_or(0.0) < b.step_size.unwrap_or(0.0)),
        };
        if better {
            best = Some((r, k));
        }
    }
    best.map(|(r, _)| r)
}

/// Groups rows by cell and picks the best step size by final test loss and
/// by test LR-fit.
pub fn select_best(rows: &[SummaryRow]) -> Vec<BestRow> {
    let mut cells: BTreeMap<CellKey, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        cells.entry(r.cell()).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|(key, group)| {
            let by_loss = argmin(&group, |r| r.test_loss);
            let by_lrfit = argmin(&group, |r| r.test_lrfit);
            let failed = group.iter().filter(|r| !r.usable()).count();
            BestRow {
                method: key.method,
                activation: key.activation,
                tau0: key.tau0.0,
                n: key.n,
                m: key.m,
                seed: key.seed,
                best_step_by_test_loss: by_loss.and_then(|r| r.step_size),
                test_loss: by_loss.and_then(|r| r.test_loss),
                best_step_by_test_lrfit: by_lrfit.and_then(|r| r.step_size),
                test_lrfit: by_lrfit.and_then(|r| r.test_lrfit),
                wcd: by_loss.and_then(|r| r.wcd),
                sigma_star_a: by_loss.and_then(|r| r.sigma_star_a),
                runs: group.len(),
                failed_runs: failed,
                failed_cell: failed == group.len(),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub best: Vec<BestRow>,
}

/// Runs every config of `spec` with up to `parallelism` concurrent runs and
/// writes `runs/<name>.record.json`, `summary.csv`, `best.csv` and a copy
/// of the spec into `out_dir`.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, parallelism: usize) -> Result<SweepOutput> {
    spec.validate()?;
    let configs = spec.expand();
    log::info!("sweep {}: {} runs, parallelism {}", spec.name, configs.len(), parallelism.max(1));
    let runs_dir = out_dir.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    fs::write(out_dir.join(SWEEP_FILE), serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(out_dir.join(SWEEP_FILE), e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config {
            field: "parallelism".into(),
            reason: e.to_string(),
        })?;
    let results: Vec<Result<SummaryRow>> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let row = execute(c).and_then(|outcome| {
                    write_outcome(&outcome, &runs_dir)?;
                    SummaryRow::from_record(&outcome.record)
                });
                match row {
                    Ok(r) => {
                        log::info!("{}: {}", r.run, r.status);
                        Ok(r)
                    }
                    Err(e @ Error::Io { .. }) => Err(e),
                    Err(e) => {
                        log::warn!("{}: {e}", c.name);
                        Ok(SummaryRow::errored(c, &e))
                    }
                }
            })
            .collect()
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    let best = select_best(&rows);
    write_csv(&out_dir.join(SUMMARY_FILE), &rows)?;
    write_csv(&out_dir.join(BEST_FILE), &best)?;
    Ok(SweepOutput {
        dir: out_dir.to_path_buf(),
        rows,
        best,
    })
}

/// Checks that every summary row with a checksum has a record whose
/// fingerprint matches.
pub fn verify_sweep(out_dir: &Path) -> Result<usize> {
    let rows = read_summary(&out_dir.join(SUMMARY_FILE))?;
    let mut checked = 0;
    for row in rows.iter().filter(|r| !r.record_sha256.is_empty()) {
        let path = out_dir.join(RUNS_DIR).join(format!("{}.record.json", row.run));
        let record = RunRecord::load(&path)?;
        let computed = record.fingerprint()?;
        if computed != row.record_sha256 {
            return Err(Error::Checksum {
                path,
                expected: row.record_sha256.clone(),
                computed,
            });
        }
        checked += 1;
    }
    Ok(checked)
}

/// Whether a status string marks a run usable for selection.
pub fn status_usable(status: &str) -> bool {
    [RunStatus::Converged, RunStatus::MaxIters, RunStatus::ClosedForm]
        .iter()
        .any(|s| s.as_str() == status)
}
