//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any failed.
//!
//! Criteria 8 to 11 share one scaled-down sweep (3 seeds, GN/GD/RF,
//! tau0 in {1e2, 1e-3}, step in {1e-2, 1, 1e2}).

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use mfgn::data::Stream;
use mfgn::experiments::{execute, run_sweep, RunConfig, RunMethod, RunRecord, SummaryRow, SweepOutput, SweepSpec};
use mfgn::linalg::smallest_eigenvalue;
use mfgn::metrics::{blowup_threshold, pinv_frobenius_norm, pl_residual, theory_rates, TheoryConstants};
use mfgn::model::{forward, jacobian, ntk_matrix, ntk_matrix_from_jacobian, Activation, BatchEval, Scaling, TwoLayerNet};
use mfgn::objective::{mse, HessianMode};
use mfgn::optim::{gn_direction, gn_step, min_norm_linear_fit, DampingConfig, DampingState, LinearFitOptions};

type Outcome = Result<String, String>;

/// Deterministic draws for the randomized checks.
struct Draws {
    stream: Stream,
    counter: u64,
}

impl Draws {
    fn new(label: &str) -> Self {
        Draws {
            stream: Stream::new(2024, label),
            counter: 0,
        }
    }

    fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.stream.uniform(self.counter)
    }

    fn normal(&mut self) -> f64 {
        self.counter += 1;
        self.stream.normal(self.counter)
    }

    /// Integer in `lo..=hi`.
    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + ((self.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
    }

    /// `exp` of a uniform draw in `[ln lo, ln hi]`.
    fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (lo.ln() + self.uniform() * (hi.ln() - lo.ln())).exp()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.normal())
    }

    fn vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.normal())
    }

    fn net(&mut self, m: usize, d: usize, act: Activation) -> TwoLayerNet {
        let v = self.vector(m);
        let u = self.matrix(m, d);
        TwoLayerNet::new(v, u, Scaling::MeanField, act).unwrap()
    }
}

fn check_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("jacobian");
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let beta = if trial % 2 == 0 { 1.0 } else { 10.0 };
        let (m, d, n) = (r.int(1, 10), r.int(1, 5), r.int(1, 8));
        let net = r.net(m, d, Activation::silu(beta).unwrap());
        let x = r.matrix(n, d);
        let j = jacobian(&net, &x).unwrap();
        let w = net.params();
        let h = 1e-5 / beta.max(1.0);
        let mut fd = DMatrix::zeros(n, w.len());
        for p in 0..w.len() {
            let mut plus = net.clone();
            let mut wp = w.clone();
            wp[p] += h;
            plus.set_params(&wp).unwrap();
            let mut minus = net.clone();
            let mut wm = w.clone();
            wm[p] -= h;
            minus.set_params(&wm).unwrap();
            let col = (forward(&plus, &x).unwrap() - forward(&minus, &x).unwrap()) / (2.0 * h);
            fd.set_column(p, &col);
        }
        let scale = j.amax().max(f64::MIN_POSITIVE);
        let rel = (&j - &fd).amax() / scale;
        worst = worst.max(rel);
        if rel > 1e-5 {
            return Err(format!("trial {trial} (M={m}, d={d}, N={n}, beta={beta}): relative error {rel:e}"));
        }
    }
    check_time(start, Duration::from_secs(10))?;
    Ok(format!("worst relative error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("ntk");
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let act = if trial % 3 == 0 { Activation::Relu } else { Activation::silu(r.log_uniform(0.5, 10.0)).unwrap() };
        let (m, d, n) = (r.int(1, 40), r.int(1, 6), r.int(1, 20));
        let net = r.net(m, d, act);
        let x = r.matrix(n, d);
        let a = ntk_matrix(&net, &x).unwrap();
        let jjt = ntk_matrix_from_jacobian(&net, &x).unwrap();
        let rel = (&a - &jjt).norm() / jjt.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if rel > 1e-10 {
            return Err(format!("trial {trial}: |A - JJ^T| / |JJ^T| = {rel:e}"));
        }
        let asym = (&a - a.transpose()).amax();
        if asym > 1e-14 * a.amax() {
            return Err(format!("trial {trial}: asymmetry {asym:e}"));
        }
        let lo = smallest_eigenvalue(&a).unwrap();
        if lo < -1e-12 * a.amax().max(1.0) {
            return Err(format!("trial {trial}: eigenvalue {lo:e}"));
        }
    }
    check_time(start, Duration::from_secs(10))?;
    Ok(format!("worst relative Frobenius error {worst:.2e}"))
}

/// `(J^T H J + eps I)^{-1} J^T grad`, solved densely in parameter space.
fn dense_gn_direction(net: &TwoLayerNet, x: &DMatrix<f64>, y: &DVector<f64>, eps: f64, hessian: HessianMode) -> DVector<f64> {
    let n = x.nrows() as f64;
    let j = jacobian(net, x).unwrap();
    let grad = (forward(net, x).unwrap() - y) / n;
    let h = match hessian {
        HessianMode::Identity => 1.0,
        HessianMode::MseHessian => 1.0 / n,
    };
    let p = j.ncols();
    let system = j.transpose() * &j * h + DMatrix::identity(p, p) * eps;
    system.lu().solve(&(j.transpose() * grad)).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("woodbury");
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let act = if trial % 2 == 0 { Activation::silu(1.0).unwrap() } else { Activation::Relu };
        let d = r.int(1, 5);
        let m = r.int(2, 200 / (d + 1));
        let n = r.int(1, 12);
        let net = r.net(m, d, act);
        let x = r.matrix(n, d);
        let y = r.vector(n);
        for hessian in [HessianMode::Identity, HessianMode::MseHessian] {
            for eps in [1e-7, 1e-2, 1.0] {
                let cfg = DampingConfig {
                    alpha: 0.0,
                    floor: eps,
                    recompute_every: 1,
                };
                let (next, diag) = gn_step(&net, &x, &y, 1.0, &cfg, hessian).unwrap();
                if diag.epsilon != eps {
                    return Err(format!("trial {trial}: solve needed retries (eps {eps:e} -> {:e})", diag.epsilon));
                }
                let phi = net.params() - next.params();
                let oracle = dense_gn_direction(&net, &x, &y, eps, hessian);
                let rel = (&phi - &oracle).norm() / oracle.norm().max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                if rel > 1e-8 {
                    return Err(format!("trial {trial} (M={m}, d={d}, N={n}, {hessian:?}, eps={eps:e}): relative error {rel:e}"));
                }
            }
        }
    }
    check_time(start, Duration::from_secs(30))?;
    Ok(format!("worst relative error {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("fixed-point");
    let mut worst_loss: f64 = 0.0;
    for trial in 0..20 {
        let act = if trial % 2 == 0 { Activation::Relu } else { Activation::silu(1.0).unwrap() };
        let (d, n) = (r.int(2, 5), r.int(2, 10));
        let m = r.int(4 * n, 60);
        let u = r.matrix(m, d);
        let x = r.matrix(n, d);
        let y = r.vector(n);
        let fit = min_norm_linear_fit(&u, act, Scaling::MeanField, &x, &y, &LinearFitOptions::default()).unwrap();
        if fit.rank < n {
            return Err(format!("trial {trial}: Gram matrix singular (rank {} < {n})", fit.rank));
        }
        let net = TwoLayerNet::new(fit.v, u, Scaling::MeanField, act).unwrap();
        let loss = mse(&forward(&net, &x).unwrap(), &y);
        worst_loss = worst_loss.max(loss);
        if loss > 1e-10 {
            return Err(format!("trial {trial}: train loss {loss:e}"));
        }
        let eval = BatchEval::new(&net, &x).unwrap();
        let (phi, _) =
            gn_direction(&net, &x, &y, &eval, &DampingConfig::default(), HessianMode::Identity, &mut DampingState::new()).unwrap();
        let limit = 1e-8 * (1.0 + net.params().amax());
        if phi.amax() > limit {
            return Err(format!("trial {trial}: |Phi|_inf = {:e} > {limit:e}", phi.amax()));
        }
    }
    check_time(start, Duration::from_secs(10))?;
    Ok(format!("worst train loss {worst_loss:.2e}"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("rate");
    let (n, m, d, gamma) = (50usize, 200usize, 5usize, 0.1);
    let act = Activation::silu(1.0).unwrap();
    let mut net = TwoLayerNet::new(r.vector(m), r.matrix(m, d), Scaling::MeanField, act).unwrap();
    let x = r.matrix(n, d);
    let y = r.vector(n);
    let cfg = DampingConfig {
        alpha: 0.0,
        floor: 1e-12,
        recompute_every: 1,
    };
    let expected = 1.0 - gamma / n as f64;
    let mut residual = forward(&net, &x).unwrap() - &y;
    let loss0 = residual.norm_squared() / (2.0 * n as f64);
    let mut worst: f64 = 0.0;
    for k in 1..=200 {
        net = gn_step(&net, &x, &y, gamma, &cfg, HessianMode::Identity).map_err(|e| format!("step {k}: {e}"))?.0;
        let next = forward(&net, &x).unwrap() - &y;
        let ratio = next.norm() / residual.norm();
        let rel = (ratio - expected).abs() / expected;
        worst = worst.max(rel);
        if rel > 10.0 * gamma * gamma {
            return Err(format!("step {k}: contraction {ratio} vs {expected}"));
        }
        let loss = next.norm_squared() / (2.0 * n as f64);
        let bound = loss0 * (-(2.0 / n as f64) * gamma * k as f64).exp() * 1.05;
        if loss > bound {
            return Err(format!("step {k}: loss {loss:e} above {bound:e}"));
        }
        residual = next;
    }
    check_time(start, Duration::from_secs(30))?;
    Ok(format!("worst contraction deviation {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("pl");
    let mut worst: f64 = f64::INFINITY;
    for net_idx in 0..10 {
        let act = if net_idx % 2 == 0 { Activation::Relu } else { Activation::silu(r.log_uniform(0.5, 10.0)).unwrap() };
        let scaling = if net_idx < 5 { Scaling::MeanField } else { Scaling::Ntk };
        let (d, n) = (r.int(2, 6), r.int(2, 15));
        let m = r.int(2 * n, 80);
        let u0 = r.matrix(m, d);
        let x = r.matrix(n, d);
        let y = r.vector(n);
        for _ in 0..10 {
            let v = r.vector(m) * r.log_uniform(1e-2, 1e2);
            let pl = pl_residual(&v, &u0, act, scaling, &x, &y).unwrap();
            let scale = pl.grad_norm_sq.max(pl.bound).max(f64::MIN_POSITIVE);
            worst = worst.min(pl.residual / scale);
            if pl.residual < -1e-10 * scale {
                return Err(format!("net {net_idx}: residual {:e} (scale {scale:e})", pl.residual));
            }
        }
    }
    check_time(start, Duration::from_secs(10))?;
    Ok(format!("smallest scaled residual {worst:.2e}"))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("pinv-bound");
    let mut tightest: f64 = f64::INFINITY;
    for trial in 0..100 {
        let n = r.int(1, 10);
        let p = r.int(n, 30);
        let j = r.matrix(n, p) * r.log_uniform(1e-3, 1e3);
        let sigma_star = smallest_eigenvalue(&(&j * j.transpose())).unwrap();
        let pinv = pinv_frobenius_norm(&j).map_err(|e| format!("trial {trial}: {e}"))?;
        let bound = pinv.powi(-2);
        tightest = tightest.min(sigma_star / bound);
        if sigma_star < bound * (1.0 - 1e-12) {
            return Err(format!("trial {trial} ({n}x{p}): sigma* {sigma_star:e} < {bound:e}"));
        }
    }
    check_time(start, Duration::from_secs(10))?;
    Ok(format!("tightest ratio sigma*/bound {tightest:.6}"))
}

fn oracle_mu_gn(mu: f64, l_h: f64, mu_h: f64, alpha: f64) -> f64 {
    2.0 * mu / (l_h * (1.0 + alpha / mu_h))
}

fn oracle_threshold(c: &TheoryConstants) -> f64 {
    let mu_gn = oracle_mu_gn(c.mu, c.l_h, c.mu_h, c.alpha);
    let radius = if c.r < 1.0 / c.c_r { c.r } else { 1.0 / c.c_r };
    let s = if c.sigma0 < 1.0 { c.sigma0 * c.sigma0 } else { c.sigma0 };
    c.mu * c.mu_h * mu_gn / (8.0 * c.l_smooth * c.n as f64) * radius * s
}

fn criterion_12() -> Outcome {
    let start = Instant::now();
    let mut r = Draws::new("theory");
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let l_smooth = r.log_uniform(1e-4, 1e2);
        let l_h = r.log_uniform(1e-3, 1e3);
        let c = TheoryConstants {
            mu: l_smooth * r.uniform().max(1e-3),
            l_smooth,
            mu_h: l_h * r.uniform().max(1e-3),
            l_h,
            alpha: if trial % 10 == 0 { 0.0 } else { r.log_uniform(1e-4, 1e2) },
            sigma0: r.log_uniform(1e-3, 1e3),
            r: r.log_uniform(1e-2, 1e2),
            c_r: r.log_uniform(1e-2, 1e2),
            n: r.int(1, 100_000),
        };
        c.validate().map_err(|e| format!("trial {trial}: {e}"))?;
        let sigma_w0 = r.log_uniform(1e-3, 1e3);
        let rates = theory_rates(&c, Some(sigma_w0));
        let errs = [
            rel(rates.mu_gn, oracle_mu_gn(c.mu, c.l_h, c.mu_h, c.alpha)),
            rel(rates.mu_gf.unwrap(), c.mu * sigma_w0 / 4.0),
            rel(blowup_threshold(&c), oracle_threshold(&c)),
        ];
        for e in errs {
            worst = worst.max(e);
            if e > 1e-15 {
                return Err(format!("trial {trial}: relative mismatch {e:e} for {c:?}"));
            }
        }
    }
    check_time(start, Duration::from_secs(1))?;
    Ok(format!("worst relative mismatch {worst:.1e}"))
}

const SEEDS: [u64; 3] = [0, 1, 2];
const TAU_KERNEL: f64 = 1e2;
const TAU_FEATURE: f64 = 1e-3;
const GN_ITERS: usize = 200;
const GD_ITERS: usize = 2000;

fn trend_sweep(dir: &Path) -> mfgn::Result<SweepOutput> {
    let base = RunConfig::from_json(
        r#"{
            "name": "base",
            "method": "gn",
            "data": {"source": "generate", "teacher": {"d": 10, "m_star": 5}, "n_train": 200, "n_test": 5000},
            "student": {"m": 1000},
            "train": {"log_every": 100000}
        }"#,
    )?;
    let spec = SweepSpec {
        name: "trend".into(),
        base,
        methods: vec![RunMethod::Gn, RunMethod::Gd, RunMethod::Rf],
        tau0_grid: vec![TAU_KERNEL, TAU_FEATURE],
        step_grid: vec![1e-2, 1.0, 1e2],
        n_grid: vec![],
        m_grid: vec![],
        seeds: SEEDS.to_vec(),
        activations: vec![],
        gn_max_iters: Some(GN_ITERS),
        gd_max_iters: Some(GD_ITERS),
    };
    run_sweep(&spec, dir, 1)
}

fn find<'a>(rows: &'a [SummaryRow], method: RunMethod, tau0: f64, step: Option<f64>, seed: u64) -> Result<&'a SummaryRow, String> {
    rows.iter()
        .find(|r| r.method == method && r.tau0 == tau0 && r.step_size == step && r.seed == seed)
        .ok_or_else(|| format!("missing run {method:?} tau0={tau0:e} step={step:?} seed={seed}"))
}

fn criterion_8(out: &SweepOutput) -> Outcome {
    let mut notes = Vec::new();
    for seed in SEEDS {
        let rf = find(&out.rows, RunMethod::Rf, TAU_KERNEL, None, seed)?.test_loss.ok_or("RF run without test loss")?;
        for method in [RunMethod::Gn, RunMethod::Gd] {
            let best = out
                .best
                .iter()
                .find(|b| b.method == method && b.tau0 == TAU_KERNEL && b.seed == seed)
                .and_then(|b| b.test_loss)
                .ok_or_else(|| format!("no usable {method:?} run at tau0=1e2, seed {seed}"))?;
            let ratio = best / rf;
            notes.push(format!("{}/rf={ratio:.2}", method.as_str()));
            if !(0.5..=2.0).contains(&ratio) {
                return Err(format!("(a) seed {seed}: {method:?} test loss {best:e} vs RF {rf:e}"));
            }
        }
        let rf_feature = find(&out.rows, RunMethod::Rf, TAU_FEATURE, None, seed)?.test_loss.ok_or("RF run without test loss")?;
        let lrfit = out
            .best
            .iter()
            .find(|b| b.method == RunMethod::Gn && b.tau0 == TAU_FEATURE && b.seed == seed)
            .and_then(|b| b.test_lrfit)
            .ok_or_else(|| format!("no usable GN run at tau0=1e-3, seed {seed}"))?;
        notes.push(format!("gn-lrfit/rf={:.3}", lrfit / rf_feature));
        if lrfit >= 0.5 * rf_feature {
            return Err(format!("(b) seed {seed}: GN test-LRfit {lrfit:e} vs RF {rf_feature:e}"));
        }
    }
    Ok(notes.join(" "))
}

fn criterion_9(out: &SweepOutput) -> Outcome {
    let lrfit = |method, step, seed| -> Result<f64, String> {
        let row = find(&out.rows, method, TAU_FEATURE, Some(step), seed)?;
        Ok(if row.usable() { row.test_lrfit.unwrap_or(f64::INFINITY) } else { f64::INFINITY })
    };
    let (mut gn_votes, mut gd_votes) = (0, 0);
    for seed in SEEDS {
        if lrfit(RunMethod::Gn, 1e-2, seed)? < lrfit(RunMethod::Gn, 1e2, seed)? {
            gn_votes += 1;
        }
        if lrfit(RunMethod::Gd, 1e-2, seed)? > lrfit(RunMethod::Gd, 1e2, seed)? {
            gd_votes += 1;
        }
    }
    let summary = format!("GN small step better on {gn_votes}/3 seeds, GD large step better on {gd_votes}/3");
    if gn_votes >= 2 && gd_votes >= 2 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_10(out: &SweepOutput) -> Outcome {
    let mut checked = 0;
    for row in out.rows.iter().filter(|r| r.method == RunMethod::Gn && r.tau0 == TAU_FEATURE) {
        let record = RunRecord::load(&out.dir.join("runs").join(format!("{}.record.json", row.run))).map_err(|e| e.to_string())?;
        let entries = &record.trace.entries;
        let first = entries.first().and_then(|e| e.sigma_star_a).ok_or("trace without initial sigma*")?;
        let last = entries.last().and_then(|e| e.sigma_star_a).ok_or("trace without final sigma*")?;
        if last < first {
            return Err(format!("{}: sigma* fell from {first:e} to {last:e}", row.run));
        }
        checked += 1;
    }
    if checked != 9 {
        return Err(format!("expected 9 GN runs at tau0=1e-3, found {checked}"));
    }
    Ok(format!("sigma* grew in all {checked} GN runs at tau0=1e-3"))
}

fn criterion_11(out: &SweepOutput) -> Outcome {
    let mut repeated = 0;
    for row in out.rows.iter().filter(|r| r.seed == 0 && r.tau0 == TAU_KERNEL && r.step_size != Some(1e-2)) {
        let stored = RunRecord::load(&out.dir.join("runs").join(format!("{}.record.json", row.run))).map_err(|e| e.to_string())?;
        let again = execute(&stored.config).map_err(|e| e.to_string())?.record;
        let a = serde_json::to_vec(&stored.without_wall_clock()).unwrap();
        let b = serde_json::to_vec(&again.without_wall_clock()).unwrap();
        if a != b {
            return Err(format!("{}: repeated run differs", row.run));
        }
        if again.fingerprint().map_err(|e| e.to_string())? != row.record_sha256 {
            return Err(format!("{}: fingerprint differs from summary", row.run));
        }
        repeated += 1;
    }
    Ok(format!("{repeated} runs repeated byte-identically"))
}

fn report(id: u32, name: &str, outcome: Outcome, failures: &mut Vec<u32>) {
    match outcome {
        Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail}"),
        Err(detail) => {
            println!("FAIL criterion {id:>2} {name}: {detail}");
            failures.push(id);
        }
    }
}

fn main() -> ExitCode {
    let mut failures = Vec::new();
    report(1, "jacobian vs finite differences", criterion_1(), &mut failures);
    report(2, "NTK formula vs JJ^T", criterion_2(), &mut failures);
    report(3, "Woodbury vs dense solve", criterion_3(), &mut failures);
    report(4, "min-norm fit is a fixed point", criterion_4(), &mut failures);
    report(5, "GN linear rate", criterion_5(), &mut failures);
    report(6, "PL inequality", criterion_6(), &mut failures);
    report(7, "pseudo-inverse eigenvalue bound", criterion_7(), &mut failures);

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    match trend_sweep(dir.path()) {
        Ok(out) => {
            let took = start.elapsed();
            let budget = |o: Outcome| match o {
                Ok(s) if took > Duration::from_secs(30 * 60) => Err(format!("{s}; sweep took {took:.0?}")),
                other => other,
            };
            report(8, "kernel regime matches RF, GN learns features", budget(criterion_8(&out)), &mut failures);
            report(9, "step-size ordering of test-LRfit", budget(criterion_9(&out)), &mut failures);
            report(10, "NTK eigenvalue grows under GN", criterion_10(&out), &mut failures);
            report(11, "repeated runs are identical", criterion_11(&out), &mut failures);
            println!("trend sweep: {} runs in {took:.1?}", out.rows.len());
        }
        Err(e) => {
            for (id, name) in [(8, "trend sweep"), (9, "trend sweep"), (10, "trend sweep"), (11, "trend sweep")] {
                report(id, name, Err(e.to_string()), &mut failures);
            }
        }
    }
    report(12, "theory arithmetic vs re-implementation", criterion_12(), &mut failures);

    if failures.is_empty() {
        println!("all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failures:?}");
        ExitCode::FAILURE
    }
}
