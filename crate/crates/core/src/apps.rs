//! Applications of the smooth value surface: the CVaR-constrained frontier
//! (two-stage scalarization) and risk-aversion monotonicity reports.

use rayon::prelude::*;
use thiserror::Error;

use crate::diagnostics::{CheckReport, CheckResult};
use crate::dual::{DualError, DualSurface, QuadratureConfig};
use crate::market::EffectiveMarket;
use crate::numerics::bisect;
use crate::primal::{PrimalError, PrimalSurface};
use crate::sim::{
    build_step_table, mean_se, simulate_wealth, ControlSpec, SimConfig, SimError,
};
use crate::utility::{UtilityError, UtilityFunction, ValidationConfig};

#[derive(Debug, Error)]
pub enum AppsError {
    #[error("invalid risk specification: {0}")]
    BadSpec(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("internal contradiction: {0}")]
    Internal(String),
    #[error(
        "bracket expansion cap reached: objective is {g_lo:.6e} at y = {lo:.6e} \
         and {g_hi:.6e} at y = {hi:.6e}"
    )]
    BracketExpansion { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },
    #[error("risk aversion undefined at the kink x = {x}")]
    Nonsmooth { x: f64 },
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Primal(#[from] PrimalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, AppsError>;

// ----------------------------------------------------------------------
// CVaR frontier
// ----------------------------------------------------------------------

/// Tail level and trade-off weight for the CVaR-penalized problem
/// `max E[U(X_T)] − λ·CVaR_β(U(x₀) − U(X_T))`.
#[derive(Debug, Clone, Copy)]
pub struct CvarSpec {
    pub beta: f64,
    pub lambda: f64,
    pub x0: f64,
}

impl CvarSpec {
    pub fn new(beta: f64, lambda: f64, x0: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(AppsError::BadSpec(format!("beta must lie in (0,1), got {beta}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(AppsError::BadSpec(format!("lambda must be ≥ 0, got {lambda}")));
        }
        if !(x0 > 0.0) || !x0.is_finite() {
            return Err(AppsError::BadSpec(format!("x0 must be positive, got {x0}")));
        }
        Ok(CvarSpec { beta, lambda, x0 })
    }

    /// Tail amplification `δ = 1/(1−β) > 1`.
    pub fn delta(&self) -> f64 {
        1.0 / (1.0 - self.beta)
    }
}

/// One point of the utility/CVaR frontier.
#[derive(Debug, Clone)]
pub struct FrontierPoint {
    pub lambda: f64,
    /// Optimal shift `y*` of the inner problem (the VaR of the optimal
    /// loss variable).
    pub y_star: f64,
    /// Scalarized optimum `g(y*) = max_π { E U − λ·CVaR }`.
    pub value: f64,
    /// Monte Carlo estimate of `E[U(X_T)]` under the modified-problem
    /// optimal control, with its standard error.
    pub utility_mc: f64,
    pub utility_se: f64,
    /// Monte Carlo CVaR/VaR of the loss `U(x₀) − U(X_T)`.
    pub cvar_mc: f64,
    pub cvar_se: f64,
    pub var_mc: f64,
}

/// The CVaR-modified utility
/// `U^y(x) = U(x) − λδ(U(x₀)−U(x)−y)⁺ + λδ(U(x₀)−y)⁺`.
///
/// Writing `w = λδ` and `c = U(x₀) − y`, for `c > 0` this is
/// `min((1+w)·U(x), U(x) + w·c)` — a pointwise minimum of concave
/// increasing functions, hence again admissible; for `c ≤ 0` or `w = 0`
/// it collapses to `U` itself.
pub fn build_modified_utility(
    u: &UtilityFunction,
    spec: &CvarSpec,
    y: f64,
) -> Result<UtilityFunction> {
    let w = spec.lambda * spec.delta();
    let c = u.eval(spec.x0) - y;
    // A numerically inactive hinge (c at rounding scale) shifts the utility
    // by at most w·c ≈ 0 while putting the branch switch at a degenerate
    // x_c; collapse to the base function instead.
    if w == 0.0 || c <= 1e-12 * (1.0 + u.eval(spec.x0).abs()) {
        return Ok(u.clone());
    }
    let branches = u.branch_decomposition().ok_or_else(|| {
        AppsError::Unsupported(
            "the CVaR modification needs a closed-form utility family \
             (tabulated utilities are not supported)"
            .to_string(),
        )
    })?;
    // The outer min switches from the scaled to the shifted copy exactly
    // where U crosses c (U is strictly increasing).
    let mut hi = spec.x0.max(1.0);
    let mut grow = 0;
    while u.eval(hi) <= c {
        hi *= 2.0;
        grow += 1;
        if grow > 600 {
            return Err(AppsError::Internal(format!(
                "could not bracket U(x) = {c}; utility may be bounded"
            )));
        }
    }
    // Solve U(x_c) = c in log space: x_c can sit many orders of magnitude
    // below x₀ (it scales like a power of c), where a linear bracket has no
    // relative resolution left.
    let mut lo = hi;
    while u.eval(lo) >= c {
        lo *= 0.5;
        if lo == 0.0 {
            return Err(AppsError::Internal(format!(
                "branch switch point for U(x) = {c} underflows the \
                 representable range"
            )));
        }
    }
    let x_c = bisect(|t| u.eval(t.exp()) - c, lo.ln(), hi.ln(), 1e-13, 200).exp();
    // Branch i of the base is active between crossovers i−1 and i. The kept
    // scaled copies (active before x_c) form a prefix of the branch list and
    // the kept shifted copies (active after) a suffix; both stay nonempty so
    // the composite covers the whole half-line. The switch points are known
    // analytically — base crossovers within each side, x_c between the sides
    // — so no crossover search is needed (x_c can sit at any positive scale,
    // far outside any fixed scan window).
    let cross = u.crossovers();
    let n = branches.len();
    let scaled_keep: Vec<usize> = (0..n)
        .filter(|&i| i == 0 || cross[i - 1] < x_c * (1.0 - 1e-9))
        .collect();
    let shifted_keep: Vec<usize> = (0..n)
        .filter(|&i| i + 1 == n || cross[i] > x_c * (1.0 + 1e-9))
        .collect();
    let mut pieces = Vec::new();
    let mut switches = Vec::new();
    for (j, &i) in scaled_keep.iter().enumerate() {
        if j > 0 {
            switches.push(cross[i - 1]);
        }
        pieces.push(branches[i].scaled(1.0 + w));
    }
    switches.push(x_c);
    for (j, &i) in shifted_keep.iter().enumerate() {
        if j > 0 {
            switches.push(cross[i - 1]);
        }
        pieces.push(branches[i].shifted(w * c));
    }
    let composite = UtilityFunction::min_of_pieces_given(pieces, switches)
        .map_err(|e| AppsError::Internal(format!("modified utility rejected: {e}")))?;
    let report = composite.validate(&ValidationConfig::default());
    if !report.passed() {
        let detail: Vec<String> = report
            .failures()
            .iter()
            .map(|f| format!("{}: {}", f.name, f.detail))
            .collect();
        return Err(AppsError::Internal(format!(
            "modified utility failed admissibility, which contradicts its \
             closure property: {}",
            detail.join("; ")
        )));
    }
    Ok(composite)
}

/// The two-stage scalarization: inner parametric utility maximization over
/// strategies, outer scalar concave maximization over the shift `y`.
pub struct TwoStage<'a> {
    pub base: &'a UtilityFunction,
    pub market: &'a EffectiveMarket,
    pub quadrature: QuadratureConfig,
    pub spec: CvarSpec,
}

impl<'a> TwoStage<'a> {
    /// Inner optimum `u(x₀, y)` for the modified utility `U^y`, via the
    /// full dual pipeline. The returned pair carries the dual state of the
    /// inversion for warm-starting neighbouring evaluations.
    pub fn inner_value_from(&self, y: f64, guess: Option<f64>) -> Result<(f64, f64)> {
        let modified = build_modified_utility(self.base, &self.spec, y)?;
        let surface = DualSurface::with_quadrature(
            self.market.clone(),
            modified.conjugate()?,
            self.quadrature,
        )?;
        let (dual_state, k) = surface.inverse_marginal_with_eval(0.0, self.spec.x0, guess)?;
        Ok((k.value + self.spec.x0 * dual_state, dual_state))
    }

    pub fn inner_value(&self, y: f64) -> Result<f64> {
        self.inner_value_from(y, None).map(|(v, _)| v)
    }

    /// Outer objective `g(y) = u(x₀,y) − λδ(U(x₀)−y)⁺ − λy`.
    pub fn objective_from(&self, y: f64, guess: Option<f64>) -> Result<(f64, f64)> {
        let (inner, dual_state) = self.inner_value_from(y, guess)?;
        let hinge = (self.base.eval(self.spec.x0) - y).max(0.0);
        let g = inner - self.spec.lambda * self.spec.delta() * hinge - self.spec.lambda * y;
        Ok((g, dual_state))
    }

    pub fn objective(&self, y: f64) -> Result<f64> {
        self.objective_from(y, None).map(|(g, _)| g)
    }

    /// Maximize the outer objective by golden-section on
    /// `[U(x₀) − 10(1+|U(x₀)|), U(x₀)]`, expanding the bracket leftward
    /// when the maximum presses against it. Returns `(y*, g(y*))`.
    ///
    /// For `y ≥ U(x₀)` the objective is affine decreasing (slope `−λ`), so
    /// the maximizer never lies to the right of the initial bracket.
    pub fn optimize(&self, y_tol: f64) -> Result<(f64, f64)> {
        let u0 = self.base.eval(self.spec.x0);
        if self.spec.lambda == 0.0 {
            // g ≡ u(0,x₀): any y maximizes; report the right endpoint.
            return Ok((u0, self.inner_value(u0)?));
        }
        let hi = u0;
        let mut lo = u0 - 10.0 * (1.0 + u0.abs());
        let mut guess = None;
        let mut expansions = 0;
        loop {
            let probe = lo + 1e-3 * (hi - lo);
            let (g_lo, s) = self.objective_from(lo, guess)?;
            guess = Some(s);
            let (g_probe, _) = self.objective_from(probe, guess)?;
            if g_probe >= g_lo - 1e-14 * (1.0 + g_lo.abs()) {
                break;
            }
            expansions += 1;
            if expansions > 40 {
                let (g_hi, _) = self.objective_from(hi, guess)?;
                return Err(AppsError::BracketExpansion { lo, hi, g_lo, g_hi });
            }
            lo -= 2.0 * (hi - lo);
        }
        // Golden-section for a concave objective.
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut gc, s) = self.objective_from(c, guess)?;
        guess = Some(s);
        let (mut gd, s) = self.objective_from(d, guess)?;
        guess = Some(s);
        while (b - a) > y_tol * (1.0 + a.abs().max(b.abs())) {
            if gc >= gd {
                b = d;
                d = c;
                gd = gc;
                c = b - phi * (b - a);
                let (g, s) = self.objective_from(c, guess)?;
                gc = g;
                guess = Some(s);
            } else {
                a = c;
                c = d;
                gc = gd;
                d = a + phi * (b - a);
                let (g, s) = self.objective_from(d, guess)?;
                gd = g;
                guess = Some(s);
            }
        }
        let (y_star, g_star) = if gc >= gd { (c, gc) } else { (d, gd) };
        Ok((y_star, g_star))
    }
}

/// Empirical CVaR and VaR of a loss sample by minimizing the
/// Rockafellar–Uryasev objective `f(y) = y + δ·mean((Z−y)⁺)`; the VaR is
/// the left endpoint of the minimizing set.
pub fn cvar_var_of_sample(losses: &[f64], beta: f64) -> Result<(f64, f64)> {
    if losses.is_empty() {
        return Err(AppsError::BadSpec("empty loss sample".to_string()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(AppsError::BadSpec(format!("beta must lie in (0,1), got {beta}")));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    // f has right derivative 1 − δ·P(Z > y); the left endpoint of the
    // minimizing set is the ⌈βn⌉-th order statistic (integer βn included:
    // there f is flat on [Z_(k), Z_(k+1)]).
    let bn = beta * n as f64;
    let mut k = bn.ceil();
    if (bn - bn.round()).abs() < 1e-9 * n as f64 {
        k = bn.round();
    }
    let k = (k as usize).clamp(1, n);
    let var = sorted[k - 1];
    let delta = 1.0 / (1.0 - beta);
    let excess: f64 = sorted[k - 1..].iter().map(|&z| (z - var).max(0.0)).sum();
    let cvar = var + delta * excess / n as f64;
    Ok((cvar, var))
}

/// Independent cross-check of [`cvar_var_of_sample`]: direct tail
/// averaging of order statistics,
/// `CVaR = δ·[ mean of samples above the β-quantile + (k/n − β)·Z_(k) ]`.
pub fn cvar_order_stat(losses: &[f64], beta: f64) -> Result<(f64, f64)> {
    if losses.is_empty() {
        return Err(AppsError::BadSpec("empty loss sample".to_string()));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let bn = beta * n as f64;
    let mut k = bn.ceil();
    if (bn - bn.round()).abs() < 1e-9 * n as f64 {
        k = bn.round();
    }
    let k = (k as usize).clamp(1, n);
    let var = sorted[k - 1];
    let tail_sum: f64 = sorted[k..].iter().sum();
    let cvar = (tail_sum / n as f64 + (k as f64 / n as f64 - beta) * var) / (1.0 - beta);
    Ok((cvar, var))
}

/// Plug-in standard error of the empirical CVaR: by the envelope property
/// the first-order error comes only from the tail mean, so
/// `se ≈ sd((Z−VaR)⁺) / ((1−β)·√n)`.
fn cvar_se(losses: &[f64], var: f64, beta: f64) -> f64 {
    let excess: Vec<f64> = losses.iter().map(|&z| (z - var).max(0.0)).collect();
    let (_, se) = crate::numerics::mean_and_se(&excess);
    se / (1.0 - beta)
}

/// Configuration of one frontier sweep.
#[derive(Debug, Clone)]
pub struct FrontierConfig {
    pub beta: f64,
    pub x0: f64,
    pub lambdas: Vec<f64>,
    /// Golden-section tolerance on the shift variable.
    pub y_tol: f64,
    /// Wealth nodes per control-table row for the per-λ simulations.
    pub table_nodes: usize,
    pub sim: SimConfig,
}

/// Sweep the trade-off weight λ: for each value solve the two-stage
/// problem, then simulate the modified problem's optimal control and
/// report Monte Carlo (utility, CVaR, VaR) coordinates of the frontier.
/// All λ share the seed, hence common random numbers.
pub fn frontier_sweep(
    base: &UtilityFunction,
    em: &EffectiveMarket,
    quadrature: QuadratureConfig,
    fc: &FrontierConfig,
) -> Result<Vec<FrontierPoint>> {
    let u0 = base.eval(fc.x0);
    fc.lambdas
        .par_iter()
        .map(|&lambda| {
            let spec = CvarSpec::new(fc.beta, lambda, fc.x0)?;
            let stage = TwoStage { base, market: em, quadrature, spec };
            let (y_star, value) = stage.optimize(fc.y_tol)?;
            let modified = build_modified_utility(base, &spec, y_star)?;
            let surface =
                DualSurface::with_quadrature(em.clone(), modified.conjugate()?, quadrature)?;
            let ps = PrimalSurface::new(surface)?;
            let table = build_step_table(&ps, &fc.sim, fc.x0, fc.table_nodes)?;
            let batch = simulate_wealth(
                em.params(),
                &ControlSpec::Table { surface: &ps, table: &table, mult: 1.0 },
                fc.x0,
                &fc.sim,
            )?;
            let rewards: Vec<f64> = batch.wealth.iter().map(|&x| base.eval(x)).collect();
            let (utility_mc, utility_se) = mean_se(&rewards, fc.sim.antithetic);
            let losses: Vec<f64> = rewards.iter().map(|&u| u0 - u).collect();
            let (cvar_mc, var_mc) = cvar_var_of_sample(&losses, fc.beta)?;
            Ok(FrontierPoint {
                lambda,
                y_star,
                value,
                utility_mc,
                utility_se,
                cvar_mc,
                cvar_se: cvar_se(&losses, var_mc, fc.beta),
                var_mc,
            })
        })
        .collect()
}

// ----------------------------------------------------------------------
// risk aversion
// ----------------------------------------------------------------------

/// Arrow–Pratt measure `R(x) = −U''(x)/U'(x)` from the family's closed-form
/// derivatives; errors at kinks, where it is undefined.
pub fn static_risk_aversion(u: &UtilityFunction, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(AppsError::BadSpec(format!("x must be positive, got {x}")));
    }
    if !u.is_smooth_at(x) {
        return Err(AppsError::Nonsmooth { x });
    }
    let curvature = u.curvature(x)?;
    let slope = u.subgradient(x).lower;
    Ok(-curvature / slope)
}

/// Dynamic Arrow–Pratt measure `R(t,x) = −u_xx/u_x`, which the dual
/// identities reduce to `1/(Y·V̂_yy(t,Y))`.
pub fn dynamic_risk_aversion(ps: &PrimalSurface, t: f64, x: f64) -> Result<f64> {
    let d = ps.derivs(t, x)?;
    Ok(-d.dxx / d.dx)
}

/// One evaluation row of the risk profile.
#[derive(Debug, Clone)]
pub struct RiskRow {
    pub t: f64,
    pub x: f64,
    pub r_dynamic: f64,
    /// `None` where the family is not C² (kinks).
    pub r_static: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub rows: Vec<RiskRow>,
    /// Strict direction of the static measure across the x grid, when the
    /// family is smooth there and the direction is uniform:
    /// `Some(true)` = decreasing.
    pub static_decreasing: Option<bool>,
    /// Direction of the terminal dual transform `yŨ'(y) − Ũ(y)`:
    /// `Some(true)` = convex.
    pub terminal_w_convex: Option<bool>,
    pub checks: CheckReport,
}

fn strict_direction(values: &[f64]) -> Option<bool> {
    let decreasing = values.windows(2).all(|p| p[1] < p[0]);
    let increasing = values.windows(2).all(|p| p[1] > p[0]);
    match (decreasing, increasing) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Divided second difference `f[y₀,y₁,y₂]` — its sign matches the sign of
/// `f''` on the stencil for uniformly convex/concave functions.
fn divided_second(y: &[f64; 3], f: &[f64; 3]) -> f64 {
    let d01 = (f[1] - f[0]) / (y[1] - y[0]);
    let d12 = (f[2] - f[1]) / (y[2] - y[1]);
    (d12 - d01) / (y[2] - y[0])
}

/// Monotonicity-preservation report: at each `t < T`, the dynamic measure
/// must be strictly monotone in `x` in the same direction as the static
/// measure (where that is defined and uniform), and the dual transform
/// `w(t,y) = yV̂_y − V̂` must inherit the convexity direction of its
/// terminal datum `yŨ' − Ũ` across the `ys` grid.
pub fn monotonicity_report(
    ps: &PrimalSurface,
    ts: &[f64],
    xs: &[f64],
    ys: &[f64],
) -> Result<MonotonicityReport> {
    if xs.len() < 3 || ys.len() < 3 {
        return Err(AppsError::BadSpec("need at least 3 grid points".to_string()));
    }
    let utility = ps.utility();
    let statics: Vec<Option<f64>> = xs
        .iter()
        .map(|&x| match static_risk_aversion(utility, x) {
            Ok(r) => Some(r),
            Err(AppsError::Nonsmooth { .. }) => None,
            Err(_) => None,
        })
        .collect();
    let static_decreasing = if statics.iter().all(Option::is_some) {
        strict_direction(&statics.iter().map(|r| r.unwrap()).collect::<Vec<_>>())
    } else {
        None
    };

    // Terminal direction of w from the conjugate's closed forms.
    let du = ps.dual().dual_utility();
    let w_term: Vec<f64> = ys.iter().map(|&y| y * du.derivative(y) - du.eval(y)).collect();
    let mut term_signs = Vec::new();
    for i in 1..ys.len() - 1 {
        let s = divided_second(
            &[ys[i - 1], ys[i], ys[i + 1]],
            &[w_term[i - 1], w_term[i], w_term[i + 1]],
        );
        term_signs.push(s);
    }
    let terminal_w_convex = if term_signs.iter().all(|&s| s > 0.0) {
        Some(true)
    } else if term_signs.iter().all(|&s| s < 0.0) {
        Some(false)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut checks = CheckReport::new();
    let surface = ps.dual();
    let market = ps.market();
    for &t in ts {
        if surface.is_terminal(t) {
            return Err(AppsError::BadSpec(format!(
                "monotonicity rows need t strictly inside the horizon, got {t}"
            )));
        }
        let mut dynamics = Vec::with_capacity(xs.len());
        for (&x, r_static) in xs.iter().zip(&statics) {
            let r_dynamic = dynamic_risk_aversion(ps, t, x)?;
            dynamics.push(r_dynamic);
            rows.push(RiskRow { t, x, r_dynamic, r_static: *r_static });
        }
        let dir = strict_direction(&dynamics);
        // The inheritance claim is conditional: only when the static measure
        // has a defined, uniform direction must the dynamic one be strictly
        // monotone the same way. Across kinks the hypothesis fails — the
        // concentrating curvature legitimately makes R(t,·) non-monotone
        // near the horizon — so there the direction is reported, not tested.
        if static_decreasing.is_some() {
            checks.push(CheckResult::from_bool(
                "dynamic-strictly-monotone",
                dir.is_some(),
                format!("R(t,·) strictly monotone at t = {t}"),
            ));
        } else {
            checks.push(CheckResult::pass(
                "dynamic-direction-observed",
                format!(
                    "static direction undefined on this grid; R(t,·) at t = {t} is {}",
                    match dir {
                        Some(true) => "strictly decreasing",
                        Some(false) => "strictly increasing",
                        None => "non-monotone",
                    }
                ),
            ));
        }
        if let (Some(stat), Some(dynam)) = (static_decreasing, dir) {
            checks.push(CheckResult::from_bool(
                "dynamic-matches-static-direction",
                stat == dynam,
                format!(
                    "direction at t = {t}: dynamic {} vs static {}",
                    if dynam { "decreasing" } else { "increasing" },
                    if stat { "decreasing" } else { "increasing" },
                ),
            ));
        }
        checks.push(CheckResult::from_bool(
            "dynamic-positive",
            dynamics.iter().all(|&r| r > 0.0),
            format!("R(t,·) > 0 at t = {t}"),
        ));

        // Lemma route: w(t,y) = yV̂_y − V̂ inherits the terminal direction.
        if let Some(convex) = terminal_w_convex {
            let tau = market.tau(t);
            let w_t: Vec<f64> = ys
                .iter()
                .map(|&y| {
                    let k = surface.flow_at(tau, y);
                    k.dm - k.value
                })
                .collect();
            let ok = (1..ys.len() - 1).all(|i| {
                let s = divided_second(
                    &[ys[i - 1], ys[i], ys[i + 1]],
                    &[w_t[i - 1], w_t[i], w_t[i + 1]],
                );
                if convex {
                    s > 0.0
                } else {
                    s < 0.0
                }
            });
            checks.push(CheckResult::from_bool(
                "dual-transform-direction-inherited",
                ok,
                format!(
                    "w(t,·) {} at t = {t} matching its terminal datum",
                    if convex { "convex" } else { "concave" }
                ),
            ));
        }
    }
    Ok(MonotonicityReport { rows, static_decreasing, terminal_w_convex, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ConeSpec, MarketParams};
    use crate::numerics::{linspace, logspace};
    use crate::utility::kinked_min_sqrt;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn merton_market() -> EffectiveMarket {
        MarketParams::scalar(1.0, 0.2, 0.4, ConeSpec::WholeSpace, 0.1)
            .unwrap()
            .effective()
            .unwrap()
    }

    // ------------------------------------------------------------------
    // modified utility
    // ------------------------------------------------------------------

    #[test]
    fn modified_utility_identities() {
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let spec = CvarSpec::new(0.75, 0.0, 1.0).unwrap();
        let m = build_modified_utility(&u, &spec, -3.0).unwrap();
        for &x in &[0.0, 0.3, 1.0, 7.0] {
            assert_eq!(m.eval(x), u.eval(x), "λ=0 must leave U unchanged");
        }
        // y ≥ U(x₀) also leaves U unchanged.
        let spec = CvarSpec::new(0.75, 1.0, 1.0).unwrap();
        let m = build_modified_utility(&u, &spec, 1.0).unwrap();
        for &x in &[0.1, 1.0, 4.0] {
            assert_eq!(m.eval(x), u.eval(x));
        }
    }

    #[test]
    fn modified_utility_power_closed_form() {
        // U = √x, x₀ = 1 (U(x₀)=1), λ=1, β=0.75 → δ=4, w=4; y=0.5 → c=0.5:
        // U^y = min(5√x, √x + 2), switching where √x = 0.5, i.e. x = 0.25.
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let spec = CvarSpec::new(0.75, 1.0, 1.0).unwrap();
        let m = build_modified_utility(&u, &spec, 0.5).unwrap();
        assert_eq!(m.eval(0.0), 0.0);
        for &x in &[0.01f64, 0.1, 0.2, 0.25, 0.3, 1.0, 9.0] {
            let s = x.sqrt();
            let direct = (5.0 * s).min(s + 2.0);
            let hinge = s - 4.0 * (0.5f64 - s).max(0.0) + 4.0 * 0.5;
            assert_relative_eq!(m.eval(x), direct, max_relative = 1e-12);
            assert_relative_eq!(m.eval(x), hinge, max_relative = 1e-12);
        }
        // The composite still conjugates and has a growth certificate.
        assert!(m.growth().is_some());
        m.conjugate().unwrap();
    }

    #[test]
    fn modified_utility_kinked_base_at_kink() {
        // Base min(x, √x) with the switch landing exactly on the kink x=1:
        // U(x₀=9)=3, y=2 → c=1, λ=0.5, δ=4 → w=2.
        let u = kinked_min_sqrt();
        let spec = CvarSpec::new(0.75, 0.5, 9.0).unwrap();
        let m = build_modified_utility(&u, &spec, 2.0).unwrap();
        for &x in &[0.04, 0.25, 0.9] {
            assert_relative_eq!(m.eval(x), 3.0 * x, max_relative = 1e-10);
        }
        for &x in &[1.1, 4.0, 100.0] {
            assert_relative_eq!(m.eval(x), x.sqrt() + 2.0, max_relative = 1e-10);
        }
        assert_eq!(m.eval(0.0), 0.0);
    }

    #[test]
    fn modified_utility_rejects_tabulated() {
        let u = UtilityFunction::tabulated(
            vec![0.0, 1.0, 2.0],
            vec![0.0, 1.0, 1.5],
            0.5,
        )
        .unwrap();
        let spec = CvarSpec::new(0.75, 1.0, 1.0).unwrap();
        let err = build_modified_utility(&u, &spec, 0.2).unwrap_err();
        assert!(matches!(err, AppsError::Unsupported(_)), "{err}");
    }

    // ------------------------------------------------------------------
    // empirical CVaR
    // ------------------------------------------------------------------

    #[test]
    fn cvar_of_tiny_samples() {
        // Constant sample.
        let (cvar, var) = cvar_var_of_sample(&[2.5, 2.5, 2.5], 0.6).unwrap();
        assert_eq!((cvar, var), (2.5, 2.5));
        // {0,1,2,3} at β = 0.75: the minimizing set of the R–U objective is
        // [2,3] (flat there), so the left endpoint — the VaR — is 2, and
        // the minimum value — the CVaR — is 3 (the mean of the worst 25%).
        let (cvar, var) = cvar_var_of_sample(&[3.0, 0.0, 2.0, 1.0], 0.75).unwrap();
        assert_eq!(var, 2.0);
        assert_relative_eq!(cvar, 3.0, max_relative = 1e-14);
        // Non-integer βn: {1..5} at β = 0.6 → VaR = Z_(3) = 3,
        // CVaR = 3 + 2.5·mean((Z−3)⁺) = 4.5.
        let (cvar, var) = cvar_var_of_sample(&[5.0, 3.0, 1.0, 4.0, 2.0], 0.6).unwrap();
        assert_eq!(var, 3.0);
        assert_relative_eq!(cvar, 4.5, max_relative = 1e-14);
        // Order-statistic route agrees exactly on both.
        let (c2, v2) = cvar_order_stat(&[3.0, 0.0, 2.0, 1.0], 0.75).unwrap();
        assert_eq!(v2, 2.0);
        assert_relative_eq!(c2, 3.0, max_relative = 1e-14);
    }

    #[test]
    fn cvar_routes_agree_on_large_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sample: Vec<f64> = (0..100_000).map(|_| rng.gen::<f64>().powi(2) * 10.0 - 3.0).collect();
        for &beta in &[0.5, 0.75, 0.9, 0.99] {
            let (c1, v1) = cvar_var_of_sample(&sample, beta).unwrap();
            let (c2, v2) = cvar_order_stat(&sample, beta).unwrap();
            assert_eq!(v1, v2);
            assert!((c1 - c2).abs() <= 1e-10 * (1.0 + c1.abs()), "{c1} vs {c2}");
            assert!(c1 >= v1, "CVaR must dominate VaR");
        }
    }

    // ------------------------------------------------------------------
    // two-stage problem
    // ------------------------------------------------------------------

    #[test]
    fn inner_value_limits() {
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let em = merton_market();
        let quad = QuadratureConfig::coarse();
        let plain = {
            let s = DualSurface::with_quadrature(em.clone(), u.conjugate().unwrap(), quad)
                .unwrap();
            let ps = PrimalSurface::new(s).unwrap();
            ps.value(0.0, 1.0).unwrap()
        };
        let spec = CvarSpec::new(0.75, 0.0, 1.0).unwrap();
        let stage = TwoStage { base: &u, market: &em, quadrature: quad, spec };
        // λ = 0: independent of y and equal to the plain value.
        for &y in &[-5.0, 0.0, 0.9] {
            assert_relative_eq!(stage.inner_value(y).unwrap(), plain, max_relative = 1e-12);
        }
        // λ > 0, y → U(x₀): the modification vanishes.
        let spec = CvarSpec::new(0.75, 2.0, 1.0).unwrap();
        let stage = TwoStage { base: &u, market: &em, quadrature: quad, spec };
        let near = stage.inner_value(1.0 - 1e-9).unwrap();
        assert_relative_eq!(near, plain, max_relative = 1e-6);
    }

    #[test]
    fn outer_objective_concave_and_golden_matches_grid() {
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let em = merton_market();
        let spec = CvarSpec::new(0.75, 0.5, 1.0).unwrap();
        // Concavity probe uses the fine default quadrature so kernel noise
        // stays far below the 1e-8 slack on raw second differences.
        let stage =
            TwoStage { base: &u, market: &em, quadrature: QuadratureConfig::default(), spec };
        let h = 0.25;
        let gs: Vec<f64> =
            (0..7).map(|i| stage.objective(-0.9 + h * i as f64).unwrap()).collect();
        for w in gs.windows(3) {
            let second = w[2] - 2.0 * w[1] + w[0];
            assert!(second <= 1e-8, "outer objective not concave: {second}");
        }
        // Golden-section vs a dense grid scan (coarse quadrature for speed).
        let stage =
            TwoStage { base: &u, market: &em, quadrature: QuadratureConfig::coarse(), spec };
        let (y_star, g_star) = stage.optimize(1e-7).unwrap();
        let lo = 1.0 - 10.0 * 2.0;
        let grid = linspace(lo, 1.0, 10_001);
        let mut best = f64::NEG_INFINITY;
        let mut best_y = lo;
        let mut guess = None;
        for &y in &grid {
            let (g, s) = stage.objective_from(y, guess).unwrap();
            guess = Some(s);
            if g > best {
                best = g;
                best_y = y;
            }
        }
        assert!(
            (g_star - best).abs() <= 1e-6 * (1.0 + best.abs()),
            "golden {g_star} vs grid {best}"
        );
        assert!((y_star - best_y).abs() <= 3e-3, "y* {y_star} vs grid {best_y}");
    }

    #[test]
    fn lambda_zero_optimize_returns_plain_value() {
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let em = merton_market();
        let spec = CvarSpec::new(0.75, 0.0, 1.0).unwrap();
        let stage =
            TwoStage { base: &u, market: &em, quadrature: QuadratureConfig::coarse(), spec };
        let (_, value) = stage.optimize(1e-6).unwrap();
        assert_relative_eq!(value, (0.125f64).exp(), max_relative = 1e-6);
    }

    // ------------------------------------------------------------------
    // frontier
    // ------------------------------------------------------------------

    #[test]
    fn frontier_sweep_small() {
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let em = merton_market();
        let fc = FrontierConfig {
            beta: 0.75,
            x0: 1.0,
            lambdas: vec![0.0, 0.3, 1.0],
            y_tol: 1e-6,
            table_nodes: 33,
            sim: SimConfig { paths: 4000, steps_per_year: 25, seed: 13, antithetic: false },
        };
        let points =
            frontier_sweep(&u, &em, QuadratureConfig::coarse(), &fc).unwrap();
        assert_eq!(points.len(), 3);
        // λ = 0 endpoint reproduces plain utility maximization.
        let plain = (0.125f64).exp();
        let p0 = &points[0];
        assert!(
            (p0.utility_mc - plain).abs() <= 3.0 * p0.utility_se,
            "λ=0 utility {} vs {plain} (se {})",
            p0.utility_mc,
            p0.utility_se
        );
        for p in &points {
            assert!(p.cvar_mc >= p.var_mc - 1e-12, "CVaR ≥ VaR violated at λ={}", p.lambda);
            assert!(p.utility_se > 0.0 && p.cvar_se > 0.0);
        }
        // CVaR nonincreasing in λ within combined Monte Carlo slack.
        for pair in points.windows(2) {
            let slack = 3.0 * (pair[0].cvar_se + pair[1].cvar_se);
            assert!(
                pair[1].cvar_mc <= pair[0].cvar_mc + slack,
                "CVaR rose along the sweep: {} → {}",
                pair[0].cvar_mc,
                pair[1].cvar_mc
            );
        }
        // Scalarized value nonincreasing in λ (more penalty can't help).
        for pair in points.windows(2) {
            assert!(pair[1].value <= pair[0].value + 1e-9);
        }
    }

    // ------------------------------------------------------------------
    // risk aversion
    // ------------------------------------------------------------------

    #[test]
    fn static_measure_closed_forms() {
        let u = UtilityFunction::power(2.0, 0.5).unwrap();
        for &x in &[0.3, 1.0, 5.0] {
            assert_relative_eq!(static_risk_aversion(&u, x).unwrap(), 0.5 / x, max_relative = 1e-12);
        }
        // Scale invariance.
        let u1 = UtilityFunction::power(1.0, 0.3).unwrap();
        let u2 = UtilityFunction::power(7.0, 0.3).unwrap();
        assert_relative_eq!(
            static_risk_aversion(&u1, 2.0).unwrap(),
            static_risk_aversion(&u2, 2.0).unwrap(),
            max_relative = 1e-12
        );
        // Kink → undefined.
        let err = static_risk_aversion(&kinked_min_sqrt(), 1.0).unwrap_err();
        assert!(matches!(err, AppsError::Nonsmooth { .. }));
    }

    fn primal_for(u: &UtilityFunction) -> PrimalSurface {
        let em = merton_market();
        let s = DualSurface::with_quadrature(
            em,
            u.conjugate().unwrap(),
            QuadratureConfig::coarse(),
        )
        .unwrap();
        PrimalSurface::new(s).unwrap()
    }

    #[test]
    fn dynamic_measure_merton_is_static() {
        for &p in &[0.3, 0.5, 0.7] {
            let u = UtilityFunction::power(1.0, p).unwrap();
            let ps = primal_for(&u);
            for &t in &[0.0, 0.4, 0.9] {
                for &x in &[0.2, 1.0, 4.0] {
                    let r = dynamic_risk_aversion(&ps, t, x).unwrap();
                    assert_relative_eq!(r, (1.0 - p) / x, max_relative = 1e-7);
                }
            }
        }
    }

    #[test]
    fn dynamic_measure_matches_finite_differences() {
        let u = UtilityFunction::power_sum(vec![(1.0, 0.3), (1.0, 0.7)]).unwrap();
        let ps = primal_for(&u);
        let (t, x) = (0.35, 1.4);
        let r = dynamic_risk_aversion(&ps, t, x).unwrap();
        let h = 1e-3 * x;
        let up = ps.value(t, x + h).unwrap();
        let mid = ps.value(t, x).unwrap();
        let dn = ps.value(t, x - h).unwrap();
        let ux = (up - dn) / (2.0 * h);
        let uxx = (up - 2.0 * mid + dn) / (h * h);
        assert_relative_eq!(r, -uxx / ux, max_relative = 1e-4);
    }

    #[test]
    fn monotonicity_smooth_families() {
        for u in [
            UtilityFunction::power(1.0, 0.5).unwrap(),
            UtilityFunction::power_sum(vec![(1.0, 0.3), (1.0, 0.7)]).unwrap(),
        ] {
            let ps = primal_for(&u);
            let ts = [0.0, 0.5, 0.9];
            let xs = logspace(0.1, 10.0, 9);
            let ys = logspace(0.2, 5.0, 9);
            let report = monotonicity_report(&ps, &ts, &xs, &ys).unwrap();
            assert_eq!(report.static_decreasing, Some(true));
            // Power-family conjugates give w_T = −c(r+1)y^{−r}: concave.
            assert_eq!(report.terminal_w_convex, Some(false));
            assert!(report.checks.passed(), "{}", report.checks.summary());
        }
    }

    #[test]
    fn monotonicity_terminal_continuity() {
        let u = UtilityFunction::power_sum(vec![(1.0, 0.3), (1.0, 0.7)]).unwrap();
        let ps = primal_for(&u);
        for &x in &[0.5, 1.0, 2.0] {
            let near = dynamic_risk_aversion(&ps, 1.0 - 1e-4, x).unwrap();
            let stat = static_risk_aversion(&u, x).unwrap();
            assert_relative_eq!(near, stat, max_relative = 5e-3);
        }
    }

    #[test]
    fn monotonicity_kinked_informational() {
        let ps = primal_for(&kinked_min_sqrt());
        let ts = [0.3, 0.8];
        // Grid chosen to land exactly on the kink at x = 1.
        let xs = logspace(0.125, 8.0, 7);
        let ys = logspace(0.3, 3.0, 7);
        let report = monotonicity_report(&ps, &ts, &xs, &ys).unwrap();
        // Static measure undefined across the kink → no direction claim, so
        // the monotonicity rows degrade to observations and the report as a
        // whole must still pass.
        assert_eq!(report.static_decreasing, None);
        assert_eq!(report.rows.len(), ts.len() * xs.len());
        assert!(report.rows.iter().all(|r| r.r_dynamic > 0.0));
        assert!(report.rows.iter().any(|r| r.r_static.is_none()));
        assert!(report.checks.checks.iter().any(|c| c.name == "dynamic-direction-observed"));
        assert!(
            report.checks.checks.iter().all(|c| c.name != "dynamic-strictly-monotone"),
            "strict claim must be hypothesis-gated"
        );
        assert!(report.checks.passed(), "{}", report.checks.summary());
    }
}
