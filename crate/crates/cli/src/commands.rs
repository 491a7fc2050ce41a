//! Subcommand implementations.
//!
//! Shared conventions:
//! - All numeric CSV cells use shortest-roundtrip float formatting, so the
//!   files are bit-faithful and byte-reproducible.
//! - Stage timings go to stderr only; stdout and every produced file are
//!   deterministic functions of the effective configuration and seed.
//! - Check failures are recorded in the run report (process exit 2);
//!   engineering errors abort the command (exit 1).

use crate::config::{ConfigError, ScenarioConfig};
use crate::report::RunReport;
use dualhjb::apps::{self, FrontierConfig};
use dualhjb::market::EffectiveMarket;
use dualhjb::numerics::{log_grid_max, logspace};
use dualhjb::sim::{duality_pairing_check, novikov_diagnostic, scheme_convergence_check, verify_value};
use dualhjb::utility::{power_matching_dual, ValidationConfig};
use dualhjb::{DualSurface, MarketParams, PrimalSurface, SimConfig, UtilityFunction};
use std::path::Path;
use std::time::Instant;

/// Failures outside the check system: bad configuration or usage (callers
/// map both variants to exit 1; check failures travel via the run report).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Engineering(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Engineering(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn eng(e: impl std::fmt::Display) -> CliError {
    CliError::Engineering(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Engineering(format!("{}: {e}", path.display()))
}

/// Run a stage and report its wall time on stderr (stdout stays clean).
fn timed<T>(name: &str, f: impl FnOnce() -> T) -> T {
    let t0 = Instant::now();
    let out = f();
    eprintln!("[time] {name}: {} ms", t0.elapsed().as_millis());
    out
}

fn fmt_f(v: f64) -> String {
    // Shortest-roundtrip formatting; fold −0.0 into 0 for tidy output.
    format!("{}", if v == 0.0 { 0.0 } else { v })
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(eng)?;
    w.write_record(header).map_err(eng)?;
    for row in rows {
        w.write_record(row).map_err(eng)?;
    }
    w.flush().map_err(eng)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// shared builders and default grids
// ---------------------------------------------------------------------------

fn effective_market(cfg: &ScenarioConfig) -> Result<EffectiveMarket> {
    cfg.build_market()?.effective().map_err(eng)
}

fn kkt_checks(em: &EffectiveMarket, report: &mut RunReport) {
    let tol = 1e-8;
    for k in 0..em.params().n_intervals() {
        let kkt = em.kkt(k);
        report.push_check(
            &format!("kkt-interval-{k}"),
            kkt.passed(tol),
            format!(
                "gradient membership {:.3e}, complementarity {:.3e} (tol {tol:.0e})",
                kkt.gradient_membership, kkt.complementarity
            ),
        );
    }
}

fn dual_surface(cfg: &ScenarioConfig, report: &mut RunReport) -> Result<DualSurface> {
    let em = timed("effective-market", || effective_market(cfg))?;
    kkt_checks(&em, report);
    let utility = cfg.build_utility()?;
    let dual = timed("conjugate", || utility.conjugate()).map_err(eng)?;
    DualSurface::with_quadrature(em, dual, cfg.quadrature()).map_err(eng)
}

fn primal_surface(cfg: &ScenarioConfig, report: &mut RunReport) -> Result<PrimalSurface> {
    let surface = dual_surface(cfg, report)?;
    PrimalSurface::new(surface).map_err(eng)
}

/// Interior evaluation times: `0, T/4, T/2, 3T/4` and a point just inside
/// the horizon.
fn default_times(t_end: f64) -> Vec<f64> {
    vec![0.0, 0.25 * t_end, 0.5 * t_end, 0.75 * t_end, t_end - f64::min(0.01, 0.1 * t_end)]
}

fn eval_times(cfg: &ScenarioConfig) -> Vec<f64> {
    cfg.application
        .surface
        .as_ref()
        .and_then(|s| s.times.clone())
        .unwrap_or_else(|| default_times(cfg.horizon()))
}

/// Dual-state grid for the dual surface dump.
fn dual_states(cfg: &ScenarioConfig, n: usize) -> Vec<f64> {
    cfg.application
        .surface
        .as_ref()
        .and_then(|s| s.states.clone())
        .unwrap_or_else(|| logspace(1e-2, 1e2, n))
}

/// Wealth grid for the primal surface and control dumps, centered on `x0`.
fn wealth_states(cfg: &ScenarioConfig, n: usize) -> Vec<f64> {
    let x0 = cfg.simulation.x0;
    cfg.application
        .surface
        .as_ref()
        .and_then(|s| s.states.clone())
        .unwrap_or_else(|| logspace(0.1 * x0, 10.0 * x0, n))
}

/// Strict-convexity audit of the dual surface over a grid.
///
/// Exact arithmetic gives `V̂_yy > 0` everywhere before the horizon, but for
/// duals with bounded support the kernel weights underflow once the whole
/// integration window sits beyond the support image (`e^{−z²}` past the f64
/// floor), and every moment there is exactly `+0.0`. The check therefore
/// demands strict positivity wherever the value itself is representable
/// (`V̂ > 1e-300`) and nonnegativity at the floored points.
struct CurvatureScan {
    min_live: f64,
    min_at: (f64, f64),
    floored: usize,
    negative_floored: usize,
    total: usize,
}

impl CurvatureScan {
    fn new() -> Self {
        CurvatureScan {
            min_live: f64::INFINITY,
            min_at: (0.0, 0.0),
            floored: 0,
            negative_floored: 0,
            total: 0,
        }
    }

    fn absorb(&mut self, t: f64, y: f64, value: f64, dyy: f64) {
        self.total += 1;
        if value > 1e-300 {
            if dyy < self.min_live {
                self.min_live = dyy;
                self.min_at = (t, y);
            }
        } else {
            self.floored += 1;
            if dyy < 0.0 {
                self.negative_floored += 1;
            }
        }
    }

    fn into_check(self, report: &mut RunReport) {
        let passed =
            self.min_live > 0.0 && self.negative_floored == 0 && self.floored < self.total;
        let mut detail = format!(
            "min V̂_yy = {:.6e} at (t, y) = ({}, {})",
            self.min_live, self.min_at.0, self.min_at.1
        );
        if self.floored > 0 {
            detail.push_str(&format!(
                "; {} of {} grid points sit beyond the f64 support floor (V̂ = 0 exactly, V̂_yy ≥ 0 there)",
                self.floored, self.total
            ));
        }
        report.push_check("dual-curvature-positive", passed, detail);
    }
}

// ---------------------------------------------------------------------------
// solve-dual
// ---------------------------------------------------------------------------

pub fn solve_dual(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let surface = dual_surface(cfg, report)?;
    let times = eval_times(cfg);
    let ys = dual_states(cfg, 41);

    let mut rows = Vec::with_capacity(times.len() * ys.len());
    let mut scan = CurvatureScan::new();
    timed("dual-grid", || -> Result<()> {
        for &t in &times {
            for &y in &ys {
                let d = surface.derivs(t, y).map_err(eng)?;
                scan.absorb(t, y, d.value, d.dyy);
                rows.push(vec![fmt_f(t), fmt_f(y), fmt_f(d.value), fmt_f(d.dy), fmt_f(d.dyy)]);
            }
        }
        Ok(())
    })?;
    scan.into_check(report);
    report.absorb("tail", &surface.tail_report(0.0).map_err(eng)?);

    let path = out_dir.join("dual_surface.csv");
    write_csv(&path, &["t", "y", "value", "dy", "dyy"], &rows)?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// solve-primal
// ---------------------------------------------------------------------------

pub fn solve_primal(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let ps = primal_surface(cfg, report)?;
    let times = eval_times(cfg);
    let xs = wealth_states(cfg, 41);

    let mut rows = Vec::with_capacity(times.len() * xs.len());
    let mut min_dx = f64::INFINITY;
    let mut max_dxx = f64::NEG_INFINITY;
    timed("primal-grid", || -> Result<()> {
        for &t in &times {
            for &x in &xs {
                let d = ps.derivs(t, x).map_err(eng)?;
                min_dx = min_dx.min(d.dx);
                max_dxx = max_dxx.max(d.dxx);
                rows.push(vec![
                    fmt_f(t),
                    fmt_f(x),
                    fmt_f(d.value),
                    fmt_f(d.dt),
                    fmt_f(d.dx),
                    fmt_f(d.dxx),
                ]);
            }
        }
        Ok(())
    })?;

    report.push_check(
        "marginal-positive",
        min_dx > 0.0,
        format!("min u_x = {min_dx:.6e} over the evaluation grid"),
    );
    report.push_check(
        "strict-concavity",
        max_dxx < 0.0,
        format!("max u_xx = {max_dxx:.6e} over the evaluation grid"),
    );
    report.absorb("growth", &ps.growth_check(&times, &xs).map_err(eng)?);

    let path = out_dir.join("primal_surface.csv");
    write_csv(&path, &["t", "x", "value", "dt", "dx", "dxx"], &rows)?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// control
// ---------------------------------------------------------------------------

pub fn control(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let ps = primal_surface(cfg, report)?;
    let times = eval_times(cfg);
    let xs = wealth_states(cfg, 41);
    let n = ps.market().params().n_assets();
    let cone = ps.market().params().cone().clone();

    let mut rows = Vec::with_capacity(times.len() * xs.len());
    let mut worst_residual: f64 = 0.0;
    let mut all_in_cone = true;
    timed("control-grid", || -> Result<()> {
        for &t in &times {
            for &x in &xs {
                let scale = ps.control_scale(t, x).map_err(eng)?;
                let pi = ps.optimal_control(t, x).map_err(eng)?;
                let tol = 1e-8 * (1.0 + pi.norm());
                if !cone.contains(&pi, tol) {
                    all_in_cone = false;
                }
                worst_residual = worst_residual.max(cone.membership_residual(&pi));
                let mut row = vec![fmt_f(t), fmt_f(x), fmt_f(scale)];
                row.extend(pi.iter().map(|&v| fmt_f(v)));
                rows.push(row);
            }
        }
        Ok(())
    })?;

    report.push_check(
        "control-in-cone",
        all_in_cone,
        format!("worst cone membership residual {worst_residual:.3e} over the evaluation grid"),
    );

    let mut header: Vec<String> = vec!["t".into(), "x".into(), "scale".into()];
    header.extend((1..=n).map(|i| format!("pi_{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let path = out_dir.join("control.csv");
    write_csv(&path, &header_refs, &rows)?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let ps = primal_surface(cfg, report)?;
    let sim = cfg.sim_config();
    let x0 = cfg.simulation.x0;
    let vr = timed("simulate", || {
        verify_value(&ps, &sim, x0, cfg.simulation.table_nodes, 4.0)
    })
    .map_err(eng)?;

    report.diag(format!("u(0, x0) = {}", vr.value0));
    report.absorb("sim", &vr.checks);
    let mut rows = Vec::with_capacity(vr.entries.len());
    for e in &vr.entries {
        rows.push(vec![
            e.name.to_string(),
            fmt_f(e.mean),
            fmt_f(e.se),
            fmt_f(e.z),
            e.batch.absorbed.to_string(),
            e.batch.table_fallbacks.to_string(),
        ]);
        let nov = novikov_diagnostic(&e.batch);
        report.diag(format!(
            "novikov/{}: mean {:.3e}, max {:.3e}, ratio {:.1}, suspicious {}",
            e.name, nov.mean, nov.max, nov.ratio, nov.suspicious
        ));
    }

    let path = out_dir.join("simulation.csv");
    write_csv(&path, &["control", "mean", "se", "z", "absorbed", "table_fallbacks"], &rows)?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// Numeric Legendre check of the conjugate pair: recompute `Ũ` from `U` by
/// scanning and refining the defining supremum, and `U` from `Ũ` by the
/// inverse transform, then compare against the closed forms.
fn conjugacy_checks(
    utility: &UtilityFunction,
    dual: &dualhjb::DualUtility,
    report: &mut RunReport,
) {
    let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
    let mut worst_fwd: f64 = 0.0;
    for &y in &[0.25, 0.5, 1.0, 2.0, 4.0] {
        let (_, numeric) = log_grid_max(|x| utility.eval(x) - x * y, 1e-8, 1e8, 1201, 80);
        let numeric = numeric.max(0.0); // the supremum includes x → 0⁺
        worst_fwd = worst_fwd.max(rel(numeric, dual.eval(y)));
    }
    report.push_check(
        "conjugacy-forward",
        worst_fwd <= 1e-5,
        format!("sup_x {{U(x) − xy}} vs closed form: worst relative error {worst_fwd:.3e}"),
    );

    let mut worst_inv: f64 = 0.0;
    for &x in &[0.25, 1.0, 4.0] {
        let (_, neg_inf) = log_grid_max(|y| -(dual.eval(y) + x * y), 1e-8, 1e8, 1201, 80);
        worst_inv = worst_inv.max(rel(-neg_inf, utility.eval(x)));
    }
    report.push_check(
        "conjugacy-inverse",
        worst_inv <= 1e-5,
        format!("inf_y {{Ũ(y) + xy}} vs U: worst relative error {worst_inv:.3e}"),
    );
}

pub fn verify(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let utility = cfg.build_utility()?;
    report.absorb("utility", &utility.validate(&ValidationConfig::default()));

    let em = timed("effective-market", || effective_market(cfg))?;
    kkt_checks(&em, report);
    let horizon = em.horizon();

    let dual = timed("conjugate", || utility.conjugate()).map_err(eng)?;
    conjugacy_checks(&utility, &dual, report);

    let surface = DualSurface::with_quadrature(em, dual, cfg.quadrature()).map_err(eng)?;
    report.absorb("tail-t0", &surface.tail_report(0.0).map_err(eng)?);
    report.absorb("tail-mid", &surface.tail_report(0.5 * horizon).map_err(eng)?);

    let times = eval_times(cfg);
    let ys = logspace(1e-2, 1e2, 21);
    let mut scan = CurvatureScan::new();
    timed("dual-curvature", || -> Result<()> {
        for &t in &times {
            for &y in &ys {
                let d = surface.derivs(t, y).map_err(eng)?;
                scan.absorb(t, y, d.value, d.dyy);
            }
        }
        Ok(())
    })?;
    scan.into_check(report);

    let ps = PrimalSurface::new(surface).map_err(eng)?;
    let xs = wealth_states(cfg, 21);

    let (coarse, fine) = timed("hjb-residual", || -> Result<_> {
        let coarse = ps.hjb_residual_grid(&times, &xs, 0.04).map_err(eng)?;
        let fine = ps.hjb_residual_grid(&times, &xs, 0.02).map_err(eng)?;
        Ok((coarse, fine))
    })?;
    report.push_check(
        "hjb-residual",
        fine.max_residual <= 1e-4,
        format!(
            "max normalized residual {:.3e} (mean {:.3e}, {} points, {} skipped)",
            fine.max_residual, fine.mean_residual, fine.points, fine.skipped
        ),
    );
    if coarse.max_residual > 1e-9 {
        let ratio = coarse.max_residual / fine.max_residual;
        report.push_check(
            "hjb-second-order",
            (2.5..=6.0).contains(&ratio),
            format!("halving the step scale divides the residual by {ratio:.2} (expected ≈4)"),
        );
    } else {
        report.push_check(
            "hjb-second-order",
            true,
            format!("residual at roundoff floor ({:.3e}); order study not meaningful", coarse.max_residual),
        );
    }
    report.absorb("growth", &ps.growth_check(&times, &xs).map_err(eng)?);

    let sim = cfg.sim_config();
    let x0 = cfg.simulation.x0;
    let nodes = cfg.simulation.table_nodes;
    let vr = timed("mc-verify", || verify_value(&ps, &sim, x0, nodes, 3.0)).map_err(eng)?;
    report.diag(format!("u(0, x0) = {}", vr.value0));
    report.absorb("mc", &vr.checks);

    let pr = timed("mc-pairing", || duality_pairing_check(&ps, &sim, x0, nodes, 3.0)).map_err(eng)?;
    report.diag(format!("duality pairing target x0·y* = {}", pr.target));
    report.absorb("pairing", &pr.checks);

    let sc = timed("mc-scheme", || scheme_convergence_check(&ps, &sim, x0, nodes)).map_err(eng)?;
    report.absorb("scheme", &sc);

    let rows: Vec<Vec<String>> = report
        .checks
        .iter()
        .map(|c| vec![c.name.clone(), c.passed.to_string(), c.detail.clone()])
        .collect();
    let path = out_dir.join("verify.csv");
    write_csv(&path, &["check", "passed", "detail"], &rows)?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cvar-frontier
// ---------------------------------------------------------------------------

pub fn cvar_frontier(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let cv = cfg.application.cvar.as_ref().ok_or_else(|| {
        CliError::Config(
            "application.cvar: required by cvar-frontier (set beta and lambdas)".to_string(),
        )
    })?;
    let base = cfg.build_utility()?;
    let em = timed("effective-market", || effective_market(cfg))?;
    kkt_checks(&em, report);

    let fc = FrontierConfig {
        beta: cv.beta,
        x0: cfg.simulation.x0,
        lambdas: cv.lambdas.clone(),
        y_tol: cv.y_tol,
        table_nodes: cfg.simulation.table_nodes,
        sim: cfg.sim_config(),
    };
    let points =
        timed("frontier-sweep", || apps::frontier_sweep(&base, &em, cfg.quadrature(), &fc))
            .map_err(eng)?;

    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        rows.push(vec![
            fmt_f(p.lambda),
            fmt_f(p.y_star),
            fmt_f(p.value),
            fmt_f(p.utility_mc),
            fmt_f(p.utility_se),
            fmt_f(p.cvar_mc),
            fmt_f(p.cvar_se),
            fmt_f(p.var_mc),
        ]);
    }

    // CVaR dominates VaR by construction of the tail average.
    let mut worst_gap: f64 = f64::INFINITY;
    for p in &points {
        worst_gap = worst_gap.min(p.cvar_mc - p.var_mc);
    }
    report.push_check(
        "cvar-at-least-var",
        worst_gap >= -1e-12,
        format!("min CVaR − VaR = {worst_gap:.6e} across the sweep"),
    );

    // Penalizing the tail harder must not worsen it (up to MC noise).
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[i].lambda.total_cmp(&points[j].lambda));
    let mut monotone = true;
    let mut detail = "CVaR nonincreasing along increasing λ".to_string();
    for w in order.windows(2) {
        let (a, b) = (&points[w[0]], &points[w[1]]);
        let slack = 3.0 * (a.cvar_se + b.cvar_se);
        if b.cvar_mc > a.cvar_mc + slack {
            monotone = false;
            detail = format!(
                "CVaR rises from {:.6e} (λ = {}) to {:.6e} (λ = {}) beyond slack {:.2e}",
                a.cvar_mc, a.lambda, b.cvar_mc, b.lambda, slack
            );
            break;
        }
    }
    report.push_check("cvar-nonincreasing", monotone, detail);

    if let Some(p0) = points.iter().find(|p| p.lambda == 0.0) {
        let gap = (p0.utility_mc - p0.value).abs();
        report.push_check(
            "lambda0-matches-unpenalized",
            gap <= 3.0 * p0.utility_se,
            format!(
                "at λ = 0: E[U(X_T)] = {:.6e} vs two-stage value {:.6e} ({:.2} se)",
                p0.utility_mc,
                p0.value,
                gap / p0.utility_se
            ),
        );
    }

    let path = out_dir.join("cvar_frontier.csv");
    write_csv(
        &path,
        &["lambda", "y_star", "value", "utility_mc", "utility_se", "cvar_mc", "cvar_se", "var_mc"],
        &rows,
    )?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// risk-profile
// ---------------------------------------------------------------------------

pub fn risk_profile(cfg: &ScenarioConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let ps = primal_surface(cfg, report)?;
    let x0 = cfg.simulation.x0;
    let risk = cfg.application.risk.as_ref();
    let times = risk
        .and_then(|r| r.times.clone())
        .unwrap_or_else(|| default_times(cfg.horizon()));
    let xs = risk
        .and_then(|r| r.wealth.clone())
        .unwrap_or_else(|| logspace(0.1 * x0, 10.0 * x0, 21));
    let ys = risk.and_then(|r| r.dual.clone()).unwrap_or_else(|| logspace(0.1, 10.0, 21));

    let mr = timed("risk-profile", || apps::monotonicity_report(&ps, &times, &xs, &ys))
        .map_err(eng)?;
    report.absorb("risk", &mr.checks);
    report.diag(match mr.static_decreasing {
        Some(true) => "static Arrow–Pratt measure: strictly decreasing in x".to_string(),
        Some(false) => "static Arrow–Pratt measure: strictly increasing in x".to_string(),
        None => "static Arrow–Pratt measure: no uniform direction (kinks or mixed)".to_string(),
    });
    report.diag(match mr.terminal_w_convex {
        Some(true) => "terminal dual transform yŨ′ − Ũ: convex".to_string(),
        Some(false) => "terminal dual transform yŨ′ − Ũ: concave".to_string(),
        None => "terminal dual transform yŨ′ − Ũ: mixed curvature on the grid".to_string(),
    });

    let rows: Vec<Vec<String>> = mr
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_f(r.t),
                fmt_f(r.x),
                fmt_f(r.r_dynamic),
                r.r_static.map(fmt_f).unwrap_or_else(|| "undefined".to_string()),
            ]
        })
        .collect();
    let path = out_dir.join("risk_profile.csv");
    write_csv(&path, &["t", "x", "r_dynamic", "r_static"], &rows)?;
    report.manifest(&path).map_err(io_err(&path))?;

    let check_rows: Vec<Vec<String>> = mr
        .checks
        .checks
        .iter()
        .map(|c| vec![c.name.clone(), c.passed.to_string(), c.detail.clone()])
        .collect();
    let cpath = out_dir.join("risk_checks.csv");
    write_csv(&cpath, &["check", "passed", "detail"], &check_rows)?;
    report.manifest(&cpath).map_err(io_err(&cpath))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Configuration-free end-to-end exercise on two built-in scenarios with
/// closed-form anchors. Every emitted number is a deterministic function of
/// the seed alone, so repeated runs must be byte-identical.
pub fn selftest(seed: u64, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let mut rows: Vec<(String, f64)> = Vec::new();

    // Single-asset benchmark: drift 0.2, volatility 0.4, unconstrained cone,
    // so |θ̂|² = 0.25, τ(0) = 0.125, u(0,x) = √x·e^{0.125}, weight 2.5.
    let params = MarketParams::scalar(1.0, 0.2, 0.4, dualhjb::ConeSpec::WholeSpace, 1e-8)
        .map_err(eng)?;
    let em = params.effective().map_err(eng)?;
    kkt_checks(&em, report);
    let tau0 = em.total_tau();
    rows.push(("tau0".to_string(), tau0));

    let sqrt_utility = UtilityFunction::power(1.0, 0.5).map_err(eng)?;
    let surface = DualSurface::new(em.clone(), sqrt_utility.conjugate().map_err(eng)?)
        .map_err(eng)?;
    let ps = PrimalSurface::new(surface).map_err(eng)?;

    let mut worst_value_rel: f64 = 0.0;
    for &x in &[0.25, 1.0, 4.0] {
        let got = ps.value(0.0, x).map_err(eng)?;
        let want = x.sqrt() * (0.125f64).exp();
        worst_value_rel = worst_value_rel.max((got / want - 1.0).abs());
        rows.push((format!("value_x{x}"), got));
    }
    report.push_check(
        "closed-form-value",
        worst_value_rel <= 1e-8,
        format!("u(0,x) vs √x·e^0.125: worst relative error {worst_value_rel:.3e}"),
    );

    let pi = ps.optimal_control(0.0, 1.0).map_err(eng)?;
    rows.push(("control_x1".to_string(), pi[0]));
    report.push_check(
        "closed-form-control",
        pi.len() == 1 && (pi[0] - 2.5).abs() <= 1e-8,
        format!("feedback weight {} vs 2.5", pi[0]),
    );

    // Dual moments: for terminal datum y^{−r} the dual surface is
    // y^{−r}·exp(r(r+1)τ(t)).
    let mut worst_moment_rel: f64 = 0.0;
    for &r in &[0.5, 1.0, 2.0] {
        let matching = power_matching_dual(r, 1.0);
        let msurf = DualSurface::new(em.clone(), matching.conjugate().map_err(eng)?)
            .map_err(eng)?;
        for &y in &[0.1, 1.0, 10.0] {
            let got = msurf.value(0.0, y);
            let want = y.powf(-r) * (r * (r + 1.0) * tau0).exp();
            worst_moment_rel = worst_moment_rel.max((got / want - 1.0).abs());
            rows.push((format!("moment_r{r}_y{y}"), got));
        }
    }
    report.push_check(
        "dual-moments",
        worst_moment_rel <= 1e-8,
        format!("V̂(0,y) vs y^−r·e^{{r(r+1)τ}}: worst relative error {worst_moment_rel:.3e}"),
    );

    // Kinked terminal datum: the smoothed dual surface stays strictly convex.
    let kinked = dualhjb::utility::kinked_min_sqrt();
    let ksurf = DualSurface::new(em.clone(), kinked.conjugate().map_err(eng)?).map_err(eng)?;
    let mut kinked_min_dyy = f64::INFINITY;
    for &y in &logspace(0.05, 20.0, 21) {
        let d = ksurf.derivs(0.0, y).map_err(eng)?;
        kinked_min_dyy = kinked_min_dyy.min(d.dyy);
    }
    rows.push(("kinked_min_dyy".to_string(), kinked_min_dyy));
    report.push_check(
        "kinked-dual-curvature",
        kinked_min_dyy > 0.0,
        format!("min V̂_yy = {kinked_min_dyy:.6e} at t = 0 for the kinked datum"),
    );

    // Small Monte Carlo leg: optimal mean within 4 se of the surface value,
    // duality pairing within 4 se of x0·y*.
    let sim = SimConfig { paths: 20_000, steps_per_year: 50, seed, antithetic: false };
    let vr = timed("selftest-sim", || verify_value(&ps, &sim, 1.0, 65, 4.0)).map_err(eng)?;
    report.absorb("sim", &vr.checks);
    rows.push(("sim_value0".to_string(), vr.value0));
    for e in &vr.entries {
        rows.push((format!("sim_mean_{}", e.name), e.mean));
        rows.push((format!("sim_se_{}", e.name), e.se));
    }
    let pr = timed("selftest-pairing", || duality_pairing_check(&ps, &sim, 1.0, 65, 4.0))
        .map_err(eng)?;
    report.absorb("pairing", &pr.checks);
    rows.push(("pairing_target".to_string(), pr.target));
    for e in &pr.entries {
        rows.push((format!("pairing_mean_{}", e.name), e.mean));
    }

    let csv_rows: Vec<Vec<String>> =
        rows.iter().map(|(k, v)| vec![k.clone(), fmt_f(*v)]).collect();
    let path = out_dir.join("selftest.csv");
    write_csv(&path, &["quantity", "value"], &csv_rows)?;
    report.manifest(&path).map_err(io_err(&path))?;
    Ok(())
}
