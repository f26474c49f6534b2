use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mfgn::data::{load_dataset, load_net, make_teacher_dataset, save_dataset, TeacherSpec};
use mfgn::experiments::{
    emit_figures, parse_activation, run_experiment, run_sweep, FigureOptions, RunConfig, SweepSpec, DEFAULT_OUT_DIR, OUT_DIR_ENV,
};
use mfgn::metrics::{
    blowup_threshold, pinv_frobenius_norm, pl_residual, smallest_eig_ntk, test_lrfit, theory_rates, TheoryConstants,
};
use mfgn::model::{forward, jacobian, Activation};
use mfgn::objective::{mse, mse_strong_convexity, HessianMode};
use mfgn::optim::parameter_gradient;

#[derive(Parser)]
#[command(name = "mfgn", version, about = "Gauss-Newton and gradient descent on teacher-student two-layer networks")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HessianArg {
    Identity,
    MseHessian,
}

impl From<HessianArg> for HessianMode {
    fn from(h: HessianArg) -> Self {
        match h {
            HessianArg::Identity => HessianMode::Identity,
            HessianArg::MseHessian => HessianMode::MseHessian,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a teacher dataset and write it as <out>.manifest.json + <out>.bin.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        m_star: usize,
        /// relu, silu or silu:<beta>
        #[arg(long, default_value = "relu", value_parser = activation_arg)]
        activation: Activation,
        #[arg(long, default_value_t = 0)]
        teacher_seed: u64,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 10_000)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Run one config and write <name>.record.json and <name>.trace.bin.
    Train {
        config: PathBuf,
        /// Override a config value, e.g. --set student.tau0=1e-3
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out_dir: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// gn, gd or rf
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        tau0: Option<f64>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Sets the teacher, data and init seeds at once.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of configs and write records, summary.csv and best.csv.
    Sweep {
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Results go to <out-dir>/<sweep name>.
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out_dir: PathBuf,
        /// Print the run count and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Test loss after refitting the linear layer of a saved net.
    Refit {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Spectral report, convergence rates, blow-up threshold and PL residual.
    Diagnose {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "identity")]
        hessian: HessianArg,
        /// Radius of the ball around the current weights.
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Bound on the Jacobian's derivative over that ball.
        #[arg(long, default_value_t = 1.0)]
        c_r: f64,
    },
    /// Build plot-ready CSVs from a directory of run records.
    Figures {
        records: PathBuf,
        /// fig1-left, fig1-right, fig2, fig4-right, fig5 or all
        #[arg(long, default_value = "all")]
        figure: String,
        /// Defaults to <records>/figures.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tau0: Option<f64>,
    },
}

fn activation_arg(s: &str) -> Result<Activation, String> {
    parse_activation(s).map_err(|e| e.to_string())
}

fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> mfgn::Result<()> {
    match cmd {
        Command::GenData {
            out,
            d,
            m_star,
            activation,
            teacher_seed,
            n_train,
            n_test,
            data_seed,
        } => {
            let spec = TeacherSpec {
                d,
                m_star,
                activation,
                seed: teacher_seed,
            };
            let ds = make_teacher_dataset(spec, n_train, n_test, data_seed)?;
            let sha = save_dataset(&out, &ds)?;
            print_json(&json!({ "dataset": out, "payload_sha256": sha, "n_train": n_train, "n_test": n_test, "d": d }));
        }
        Command::Train {
            config,
            mut overrides,
            out_dir,
            name,
            method,
            tau0,
            step_size,
            max_iters,
            seed,
        } => {
            let mut named = Vec::new();
            if let Some(n) = name {
                named.push(format!("name={}", serde_json::Value::String(n)));
            }
            if let Some(m) = method {
                named.push(format!("method={}", serde_json::Value::String(m)));
            }
            if let Some(t) = tau0 {
                named.push(format!("student.tau0={t:e}"));
            }
            if let Some(s) = step_size {
                named.push(format!("train.step_size={s:e}"));
            }
            if let Some(k) = max_iters {
                named.push(format!("train.max_iters={k}"));
            }
            let base = RunConfig::load(&config)?;
            if let Some(s) = seed {
                named.push(format!("student.init_seed={s}"));
                if matches!(base.data, mfgn::experiments::DataSource::Generate { .. }) {
                    named.push(format!("data.teacher.seed={s}"));
                    named.push(format!("data.data_seed={s}"));
                }
            }
            // named flags first, so explicit --set wins
            named.append(&mut overrides);
            let cfg = base.with_overrides(&named)?;
            let (record, paths) = run_experiment(&cfg, &out_dir)?;
            print_json(&json!({
                "record": paths.record,
                "trace": paths.trace,
                "status": record.status,
                "iterations": record.iterations,
                "reached_target": record.reached_target,
                "final": record.final_metrics,
                "failure": record.failure,
            }));
        }
        Command::Sweep {
            spec,
            parallelism,
            out_dir,
            dry_run,
        } => {
            let spec = SweepSpec::load(&spec)?;
            let runs = spec.expand().len();
            eprintln!("sweep {}: {runs} runs", spec.name);
            if dry_run {
                return Ok(());
            }
            let dir = out_dir.join(&spec.name);
            let out = run_sweep(&spec, &dir, parallelism)?;
            let failed = out.rows.iter().filter(|r| !r.usable()).count();
            print_json(&json!({ "dir": out.dir, "runs": out.rows.len(), "failed": failed, "cells": out.best.len() }));
        }
        Command::Refit { net, data } => {
            let net = load_net(&net)?;
            let ds = load_dataset(&data)?;
            let lr = test_lrfit(net.u(), net.activation(), net.scaling(), (&ds.x_train, &ds.y_train), (&ds.x_test, &ds.y_test))?;
            print_json(&json!({ "test_lrfit": lr }));
        }
        Command::Diagnose {
            net,
            data,
            alpha,
            hessian,
            radius,
            c_r,
        } => diagnose(&net, &data, alpha, hessian.into(), radius, c_r)?,
        Command::Figures { records, figure, out, tau0 } => {
            let out = out.unwrap_or_else(|| records.join("figures"));
            let written = emit_figures(&records, &figure, &out, FigureOptions { tau0 })?;
            print_json(&json!({ "written": written }));
        }
    }
    Ok(())
}

fn diagnose(net_path: &Path, data_path: &Path, alpha: f64, hessian: HessianMode, radius: f64, c_r: f64) -> mfgn::Result<()> {
    let net = load_net(net_path)?;
    let ds = load_dataset(data_path)?;
    let (x, y) = (&ds.x_train, &ds.y_train);
    let n = x.nrows();
    let train_loss = mse(&forward(&net, x)?, y);
    let test_loss = if ds.n_test() > 0 { Some(mse(&forward(&net, &ds.x_test)?, &ds.y_test)) } else { None };
    let sigma_star_a = smallest_eig_ntk(&net, x)?;
    let pl = pl_residual(net.v(), net.u(), net.activation(), net.scaling(), x, y)?;
    let pinv = match pinv_frobenius_norm(&jacobian(&net, x)?) {
        Ok(v) => json!(v),
        Err(e) => json!(e.to_string()),
    };
    let grad_norm = parameter_gradient(&net, x, y)?.norm();
    let mu = mse_strong_convexity(n);
    let (mu_h, l_h) = hessian.bounds(n);
    let tc = TheoryConstants {
        mu,
        l_smooth: mu,
        mu_h,
        l_h,
        alpha,
        sigma0: pl.sigma0_sq.sqrt(),
        r: radius,
        c_r,
        n,
    };
    let (rates, threshold) = match tc.validate() {
        Ok(()) => (json!(theory_rates(&tc, Some(sigma_star_a.sqrt()))), json!(blowup_threshold(&tc))),
        Err(e) => (json!(e.to_string()), serde_json::Value::Null),
    };
    print_json(&json!({
        "n": n,
        "m": net.m(),
        "d": net.d(),
        "train_loss": train_loss,
        "test_loss": test_loss,
        "sigma_star_a": sigma_star_a,
        "gram_sigma0_sq": pl.sigma0_sq,
        "jacobian_pinv_frobenius": pinv,
        "gradient_norm": grad_norm,
        "constants": tc,
        "rates": rates,
        "blowup_threshold": threshold,
        "below_threshold": threshold.as_f64().map(|t| grad_norm < t),
        "pl": pl,
    }));
    Ok(())
}
