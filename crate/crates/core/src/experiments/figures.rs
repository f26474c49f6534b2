//! Plot-ready CSV tables built from a directory of run records.
//!
//! | id           | file               | one row per                                   |
//! |--------------|--------------------|-----------------------------------------------|
//! | `fig1-left`  | `fig1-left.csv`    | (method, activation, tau0, n, m), best step   |
//! | `fig1-right` | `fig1-right.csv`   | (method, activation, tau0, n, m, step_size)   |
//! | `fig2`       | `fig2.csv`         | trace entry of every run                      |
//! | `fig4-right` | `fig4-right.csv`   | trace entry with an NTK eigenvalue            |
//! | `fig5`       | `fig5.csv`, `fig5-slopes.csv` | (method, activation, tau0, m, n) and one slope per series |
//!
//! Aggregates are means (and population standard deviations) over seeds.
//! Seed-level best steps follow [`select_best`]: smallest final test loss,
//! or smallest test LR-fit, ties to the smaller step.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{activation_slug, RunMethod};
use super::run::RunRecord;
use super::sweep::{select_best, write_csv, BestRow, OrdF64, SummaryRow, SweepSpec, SWEEP_FILE};
use crate::error::{Error, Result};

pub const FIGURE_IDS: [&str; 5] = ["fig1-left", "fig1-right", "fig2", "fig4-right", "fig5"];

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FigureOptions {
    /// Keep only runs with this initialization scale (`fig1-right`,
    /// `fig4-right`).
    pub tau0: Option<f64>,
}

/// Every `*.record.json` under `dir`, sorted by path.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    collect(dir, &mut paths)?;
    paths.sort();
    paths.iter().map(|p| RunRecord::load(p)).collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.to_string_lossy().ends_with(".record.json") {
            out.push(path);
        }
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().filter(|x| x.is_finite()).collect();
    mean_std(&v).0
}

/// Least-squares fit of `ln y = intercept + slope ln x`. Needs at least two
/// distinct positive `x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig1LeftRow {
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    pub n: Option<usize>,
    pub m: usize,
    pub seeds: usize,
    pub seeds_ok: usize,
    pub test_loss_mean: Option<f64>,
    pub test_loss_std: Option<f64>,
    pub test_lrfit_mean: Option<f64>,
    pub test_lrfit_std: Option<f64>,
    pub wcd_mean: Option<f64>,
    pub sigma_star_a_mean: Option<f64>,
    pub failed_cell: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig1RightRow {
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    pub n: Option<usize>,
    pub m: usize,
    pub step_size: Option<f64>,
    pub runs: usize,
    pub runs_ok: usize,
    pub test_loss_mean: Option<f64>,
    pub test_lrfit_mean: Option<f64>,
    pub wcd_mean: Option<f64>,
    pub sigma_star_a_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub run: String,
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    pub step_size: Option<f64>,
    pub n: Option<usize>,
    pub m: usize,
    pub seed: u64,
    pub iter: usize,
    pub wall_seconds: f64,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_lrfit: Option<f64>,
    pub wcd: Option<f64>,
    pub sigma_star_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaRow {
    pub run: String,
    pub method: RunMethod,
    pub tau0: f64,
    pub step_size: Option<f64>,
    pub seed: u64,
    pub iter: usize,
    pub sigma_star_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig5Row {
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    pub m: usize,
    pub n: usize,
    pub seeds_ok: usize,
    pub test_loss_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig5SlopeRow {
    pub method: RunMethod,
    pub activation: String,
    pub tau0: f64,
    pub m: usize,
    pub points: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

type SeriesKey = (RunMethod, String, OrdF64, Option<usize>, usize);

fn series_key(b: &BestRow) -> SeriesKey {
    (b.method, b.activation.clone(), OrdF64(b.tau0), b.n, b.m)
}

pub fn fig1_left(rows: &[SummaryRow]) -> Vec<Fig1LeftRow> {
    let mut groups: BTreeMap<SeriesKey, Vec<BestRow>> = BTreeMap::new();
    for b in select_best(rows) {
        groups.entry(series_key(&b)).or_default().push(b);
    }
    groups
        .into_iter()
        .map(|((method, activation, tau0, n, m), bests)| {
            let losses: Vec<f64> = bests.iter().filter_map(|b| b.test_loss).collect();
            let lrfits: Vec<f64> = bests.iter().filter_map(|b| b.test_lrfit).collect();
            let (test_loss_mean, test_loss_std) = mean_std(&losses);
            let (test_lrfit_mean, test_lrfit_std) = mean_std(&lrfits);
            Fig1LeftRow {
                method,
                activation,
                tau0: tau0.0,
                n,
                m,
                seeds: bests.len(),
                seeds_ok: losses.len(),
                test_loss_mean,
                test_loss_std,
                test_lrfit_mean,
                test_lrfit_std,
                wcd_mean: mean(bests.iter().map(|b| b.wcd)),
                sigma_star_a_mean: mean(bests.iter().map(|b| b.sigma_star_a)),
                failed_cell: losses.is_empty(),
            }
        })
        .collect()
}

pub fn fig1_right(rows: &[SummaryRow], tau0: Option<f64>) -> Vec<Fig1RightRow> {
    type Key = (RunMethod, String, OrdF64, Option<usize>, usize, Option<OrdF64>);
    let mut groups: BTreeMap<Key, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| tau0.is_none_or(|t| r.tau0 == t)) {
        let key = (r.method, r.activation.clone(), OrdF64(r.tau0), r.n, r.m, r.step_size.map(OrdF64));
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, activation, tau0, n, m, step), group)| {
            let ok: Vec<&&SummaryRow> = group.iter().filter(|r| r.usable()).collect();
            Fig1RightRow {
                method,
                activation,
                tau0: tau0.0,
                n,
                m,
                step_size: step.map(|s| s.0),
                runs: group.len(),
                runs_ok: ok.len(),
                test_loss_mean: mean(ok.iter().map(|r| r.test_loss)),
                test_lrfit_mean: mean(ok.iter().map(|r| r.test_lrfit)),
                wcd_mean: mean(ok.iter().map(|r| r.wcd)),
                sigma_star_a_mean: mean(ok.iter().map(|r| r.sigma_star_a)),
            }
        })
        .collect()
}

pub fn fig2(records: &[RunRecord]) -> Vec<TraceRow> {
    let mut out = Vec::new();
    for r in records {
        let c = &r.config;
        let n = match &c.data {
            super::config::DataSource::Generate { n_train, .. } => Some(*n_train),
            super::config::DataSource::File { .. } => None,
        };
        for e in &r.trace.entries {
            out.push(TraceRow {
                run: c.name.clone(),
                method: c.method,
                activation: activation_slug(c.student.activation),
                tau0: c.student.tau0,
                step_size: (c.method != RunMethod::Rf).then_some(c.train.step_size),
                n,
                m: c.student.m,
                seed: c.student.init_seed,
                iter: e.iter,
                wall_seconds: e.wall_seconds,
                train_loss: e.train_loss,
                test_loss: e.test_loss,
                test_lrfit: e.test_lrfit,
                wcd: e.wcd,
                sigma_star_a: e.sigma_star_a,
            });
        }
    }
    out
}

pub fn fig4_right(records: &[RunRecord], tau0: Option<f64>) -> Vec<SigmaRow> {
    fig2(records)
        .into_iter()
        .filter(|t| tau0.is_none_or(|x| t.tau0 == x))
        .filter_map(|t| {
            Some(SigmaRow {
                sigma_star_a: t.sigma_star_a?,
                run: t.run,
                method: t.method,
                tau0: t.tau0,
                step_size: t.step_size,
                seed: t.seed,
                iter: t.iter,
            })
        })
        .collect()
}

pub fn fig5(rows: &[SummaryRow]) -> (Vec<Fig5Row>, Vec<Fig5SlopeRow>) {
    let points: Vec<Fig5Row> = fig1_left(rows)
        .into_iter()
        .filter_map(|r| {
            Some(Fig5Row {
                n: r.n?,
                method: r.method,
                activation: r.activation,
                tau0: r.tau0,
                m: r.m,
                seeds_ok: r.seeds_ok,
                test_loss_mean: r.test_loss_mean,
            })
        })
        .collect();
    let mut series: BTreeMap<(RunMethod, String, OrdF64, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for p in &points {
        let entry = series.entry((p.method, p.activation.clone(), OrdF64(p.tau0), p.m)).or_default();
        if let Some(l) = p.test_loss_mean {
            entry.push((p.n as f64, l));
        }
    }
    let slopes = series
        .into_iter()
        .map(|((method, activation, tau0, m), pts)| {
            let fit = fit_loglog_slope(&pts);
            Fig5SlopeRow {
                method,
                activation,
                tau0: tau0.0,
                m,
                points: pts.len(),
                slope: fit.map(|f| f.0),
                intercept: fit.map(|f| f.1),
            }
        })
        .collect();
    (points, slopes)
}

/// Grid cells `(method, tau0, step)` the sweep spec in `dir` asked for but
/// no record provides.
fn missing_cells(dir: &Path, rows: &[SummaryRow]) -> Result<Vec<String>> {
    let spec_path = dir.join(SWEEP_FILE);
    if !spec_path.exists() {
        return Ok(Vec::new());
    }
    let spec = SweepSpec::load(&spec_path)?;
    let present: BTreeSet<(RunMethod, OrdF64, Option<OrdF64>)> =
        rows.iter().map(|r| (r.method, OrdF64(r.tau0), r.step_size.map(OrdF64))).collect();
    let mut missing = BTreeSet::new();
    for c in spec.expand() {
        let step = (c.method != RunMethod::Rf).then_some(OrdF64(c.train.step_size));
        let key = (c.method, OrdF64(c.student.tau0), step);
        if !present.contains(&key) {
            missing.insert(key);
        }
    }
    Ok(missing
        .into_iter()
        .map(|(m, t, s)| match s {
            Some(s) => format!("({}, tau0={:e}, step={:e})", m.as_str(), t.0, s.0),
            None => format!("({}, tau0={:e})", m.as_str(), t.0),
        })
        .collect())
}

/// Writes the CSV(s) of `figure` (or of every figure for `"all"`) into
/// `out_dir` and returns the written paths.
pub fn emit_figures(records_dir: &Path, figure: &str, out_dir: &Path, opts: FigureOptions) -> Result<Vec<PathBuf>> {
    let ids: Vec<&str> = if figure == "all" {
        FIGURE_IDS.to_vec()
    } else if FIGURE_IDS.contains(&figure) {
        vec![figure]
    } else {
        return Err(Error::Config {
            field: "figure".into(),
            reason: format!("unknown figure {figure:?}; expected one of {} or all", FIGURE_IDS.join(", ")),
        });
    };
    let records = load_records(records_dir)?;
    if records.is_empty() {
        return Err(Error::MissingSeries(format!("no run records under {}", records_dir.display())));
    }
    let rows = records.iter().map(SummaryRow::from_record).collect::<Result<Vec<_>>>()?;
    let missing = missing_cells(records_dir, &rows)?;
    if !missing.is_empty() {
        return Err(Error::MissingSeries(format!("absent (method, tau0, step) cells: {}", missing.join(", "))));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut written = Vec::new();
    for id in ids {
        let path = out_dir.join(format!("{id}.csv"));
        match id {
            "fig1-left" => write_csv(&path, &fig1_left(&rows))?,
            "fig1-right" => {
                let table = fig1_right(&rows, opts.tau0);
                if table.is_empty() {
                    return Err(Error::MissingSeries(format!("no runs with tau0 = {:?}", opts.tau0)));
                }
                write_csv(&path, &table)?
            }
            "fig2" => write_csv(&path, &fig2(&records))?,
            "fig4-right" => {
                let table = fig4_right(&records, opts.tau0);
                if table.is_empty() {
                    return Err(Error::MissingSeries("no trace entry carries an NTK eigenvalue".into()));
                }
                write_csv(&path, &table)?
            }
            "fig5" => {
                let (points, slopes) = fig5(&rows);
                write_csv(&path, &points)?;
                let slope_path = out_dir.join("fig5-slopes.csv");
                write_csv(&slope_path, &slopes)?;
                written.push(path.clone());
                written.push(slope_path);
                continue;
            }
            _ => unreachable!(),
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::RunConfig;
    use crate::experiments::run::{execute, write_outcome};
    use crate::experiments::sweep::{run_sweep, RUNS_DIR};

    fn base_cfg() -> RunConfig {
        RunConfig::from_json(
            r#"{"name": "x", "method": "rf",
                "data": {"source": "generate", "n_train": 6, "n_test": 10, "teacher": {"d": 3, "m_star": 2}},
                "student": {"m": 8, "tau0": 1.0}}"#,
        )
        .unwrap()
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [100.0, 200.0, 400.0, 800.0].iter().map(|&n| (n, 3.0 / f64::sqrt(n))).collect();
        let (slope, intercept) = fit_loglog_slope(&pts).unwrap();
        assert!((slope + 0.5).abs() < 1e-12);
        assert!((intercept - 3f64.ln()).abs() < 1e-10);
        assert!(fit_loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn fig5_from_synthetic_records() {
        let dir = tempfile::tempdir().unwrap();
        let template = execute(&base_cfg()).unwrap();
        for (k, n) in [50usize, 100, 200, 400].into_iter().enumerate() {
            let mut o = template.clone();
            o.record.config.name = format!("p{k}");
            if let crate::experiments::config::DataSource::Generate { n_train, .. } = &mut o.record.config.data {
                *n_train = n;
            }
            o.record.final_metrics.test_loss = Some(2.0 / (n as f64).sqrt());
            write_outcome(&o, dir.path()).unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        emit_figures(dir.path(), "fig5", out.path(), FigureOptions::default()).unwrap();
        let mut r = csv::Reader::from_path(out.path().join("fig5-slopes.csv")).unwrap();
        let row: BTreeMap<String, String> = r.deserialize().next().unwrap().unwrap();
        let slope: f64 = row["slope"].parse().unwrap();
        assert!((slope + 0.5).abs() < 1e-6, "{slope}");
        assert_eq!(row["points"], "4");
    }

    #[test]
    fn fig2_rows_match_trace_and_output_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_cfg().with_overrides(&["method=gd".into(), "train.max_iters=9".into(), "train.log_every=2".into()]).unwrap();
        let o = execute(&cfg).unwrap();
        write_outcome(&o, dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let paths = emit_figures(dir.path(), "all", out.path(), FigureOptions::default()).unwrap();
        assert_eq!(paths.len(), 6);
        let n = csv::Reader::from_path(out.path().join("fig2.csv")).unwrap().records().count();
        assert_eq!(n, o.record.trace.len());
        let first: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_figures(dir.path(), "all", out.path(), FigureOptions::default()).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert!(emit_figures(dir.path(), "fig9", out.path(), FigureOptions::default()).is_err());
    }

    #[test]
    fn fig1_left_one_row_per_cell_and_missing_series_named() {
        let spec = SweepSpec {
            name: "s".into(),
            base: base_cfg().with_overrides(&["train.max_iters=2".into()]).unwrap(),
            methods: vec![RunMethod::Gn, RunMethod::Rf],
            tau0_grid: vec![0.5, 1.0],
            step_grid: vec![0.1, 1.0],
            n_grid: vec![],
            m_grid: vec![],
            seeds: vec![0, 1],
            activations: vec![],
            gn_max_iters: None,
            gd_max_iters: None,
        };
        let dir = tempfile::tempdir().unwrap();
        run_sweep(&spec, dir.path(), 2).unwrap();
        let out = tempfile::tempdir().unwrap();
        emit_figures(dir.path(), "fig1-left", out.path(), FigureOptions::default()).unwrap();
        let rows = csv::Reader::from_path(out.path().join("fig1-left.csv")).unwrap().records().count();
        assert_eq!(rows, 4); // (gn, rf) x two tau0

        // drop every gn run at tau0 = 0.5, step 0.1
        for e in fs::read_dir(dir.path().join(RUNS_DIR)).unwrap() {
            let p = e.unwrap().path();
            if p.to_string_lossy().contains("gn-relu-tau5e-1-lr1e-1") {
                fs::remove_file(p).unwrap();
            }
        }
        let err = emit_figures(dir.path(), "fig1-left", out.path(), FigureOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::MissingSeries(_)));
        assert!(msg.contains("gn, tau0=5e-1, step=1e-1"), "{msg}");
    }
}
