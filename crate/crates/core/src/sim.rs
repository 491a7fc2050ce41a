//! Reproducible Monte Carlo for the wealth and dual processes.
//!
//! The wealth SDE `dX = X(π'b dt + π'σ dW)` is advanced in logarithms
//! (`ln X` gains `(π'b − ½|π'σ|²)Δt + (π'σ)'ΔW`), which keeps every sample
//! strictly positive by construction; the dual SDE `dŶ = −Ŷ θ̂'dW` is
//! lognormal with piecewise-constant coefficients, so its stepwise update is
//! exact in law. Both processes can be driven by the same increments, which
//! is what the duality-pairing check needs.
//!
//! Reproducibility contract: each simulation unit (a path, or an antithetic
//! pair) owns a counter-based RNG stream derived statelessly from
//! `(seed, unit index)`; units are collected in index order and reduced
//! sequentially, so results are bit-identical for a fixed seed regardless
//! of how many worker threads run the units.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::diagnostics::{CheckReport, CheckResult};
use crate::market::{EffectiveMarket, MarketParams};
use crate::numerics::mean_and_se;
use crate::primal::{ControlTable, PrimalError, PrimalSurface};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("inadmissible control at step {step} (t = {time}): {detail}")]
    Control { step: usize, time: f64, detail: String },
    #[error("feedback evaluation failed: {0}")]
    Feedback(#[from] PrimalError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Simulation budget and reproducibility knobs.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Number of terminal samples produced.
    pub paths: usize,
    /// Uniform steps per unit of time (knots of the coefficient grid are
    /// inserted on top, so coefficients are constant within every step).
    pub steps_per_year: usize,
    pub seed: u64,
    /// Pair each unit with its increment-mirrored twin.
    pub antithetic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { paths: 100_000, steps_per_year: 250, seed: 7, antithetic: false }
    }
}

impl SimConfig {
    pub fn validated(self) -> Result<Self> {
        if self.paths < 2 {
            return Err(SimError::BadConfig("need at least 2 paths".to_string()));
        }
        if self.antithetic && self.paths % 2 != 0 {
            return Err(SimError::BadConfig(
                "antithetic sampling needs an even path count".to_string(),
            ));
        }
        if self.steps_per_year == 0 {
            return Err(SimError::BadConfig("steps_per_year must be positive".to_string()));
        }
        Ok(self)
    }
}

/// Feedback control driving the wealth leg.
pub enum ControlSpec<'a> {
    /// No position; always admissible (the cone contains the origin).
    Zero,
    /// Fixed weight vector, cone-checked once before the run.
    Constant(DVector<f64>),
    /// Tabulated optimal feedback `mult · s(t,x) · (σ')⁻¹θ̂`, with exact
    /// pointwise fallback outside the table. `mult ≥ 0` keeps it conic.
    Table { surface: &'a PrimalSurface, table: &'a ControlTable, mult: f64 },
    /// Arbitrary feedback `(step, t, x) → π`; cone-checked at every step.
    General(&'a (dyn Fn(usize, f64, f64) -> DVector<f64> + Sync)),
}

/// Terminal samples of one batch. `mean`/`se` summarize the wealth samples
/// when present, otherwise the dual samples (antithetic batches compute the
/// standard error over independent pair means).
#[derive(Debug, Clone)]
pub struct PathBatchResult {
    /// Terminal wealth per path (empty if no wealth leg ran).
    pub wealth: Vec<f64>,
    /// Terminal dual state per path (empty if no dual leg ran).
    pub dual: Vec<f64>,
    /// Realized `∫|π'σ|² dt` per path (empty if no wealth leg ran).
    pub control_energy: Vec<f64>,
    /// Times the tabulated control fell back to an exact pointwise solve.
    pub table_fallbacks: usize,
    /// Paths whose wealth was frozen at the underflow floor (≈ e⁻⁶⁰⁰).
    /// Such a path contributes a vanishing reward to every estimator at
    /// double precision, so freezing is bias-free; its control energy stops
    /// accruing at absorption.
    pub absorbed: usize,
    pub mean: f64,
    pub se: f64,
}

/// Mean and standard error honouring antithetic pairing: with pairing the
/// independent units are the adjacent-pair averages.
pub fn mean_se(samples: &[f64], antithetic: bool) -> (f64, f64) {
    if antithetic {
        let pairs: Vec<f64> =
            samples.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect();
        mean_and_se(&pairs)
    } else {
        mean_and_se(samples)
    }
}

// ----------------------------------------------------------------------
// the stepping engine
// ----------------------------------------------------------------------

/// Uniform step grid refined by the coefficient switch dates.
struct StepGrid {
    bounds: Vec<f64>,
    interval: Vec<usize>,
}

impl StepGrid {
    fn build(params: &MarketParams, steps_per_year: usize) -> Self {
        let t_end = params.horizon();
        let n = ((steps_per_year as f64) * t_end).round().max(1.0) as usize;
        let mut bounds: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
        for &g in &params.grid()[1..params.grid().len() - 1] {
            bounds.push(g);
        }
        bounds.sort_by(|a, b| a.total_cmp(b));
        bounds.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + t_end));
        let interval = bounds[..bounds.len() - 1]
            .iter()
            .map(|&t| params.interval_index(t))
            .collect();
        StepGrid { bounds, interval }
    }

    fn steps(&self) -> usize {
        self.interval.len()
    }

    fn left_times(&self) -> &[f64] {
        &self.bounds[..self.bounds.len() - 1]
    }
}

/// Per-interval precomputation for one control variant.
enum PreparedControl<'a> {
    Zero,
    Constant {
        /// `π'b` per interval.
        drift: Vec<f64>,
        /// `σᵀπ` per interval.
        vol: Vec<DVector<f64>>,
    },
    Table {
        surface: &'a PrimalSurface,
        table: &'a ControlTable,
        mult: f64,
    },
    General(&'a (dyn Fn(usize, f64, f64) -> DVector<f64> + Sync)),
}

struct Engine<'a> {
    params: &'a MarketParams,
    /// Needed by the dual leg and the tabulated control.
    effective: Option<&'a EffectiveMarket>,
    grid: StepGrid,
    control: Option<PreparedControl<'a>>,
    x0: f64,
    y0: f64,
    /// Re-evaluate the feedback only every `stride` steps (1 = every step);
    /// used by the scheme-convergence check to isolate discretization bias
    /// from Monte Carlo noise on identical increments.
    control_stride: usize,
}

/// One simulated leg's terminal data.
#[derive(Clone, Copy, Default)]
struct LegOut {
    ln_x: f64,
    ln_y: f64,
    energy: f64,
    fallbacks: usize,
    absorbed: bool,
}

/// Freeze a wealth path here: `exp(LN_FLOOR) ≈ 2.7e-261` is still strictly
/// positive but contributes nothing to any estimator at double precision.
/// (An aggressively levered control in a locally risk-neutral utility
/// region can genuinely drive `ln X` toward −∞ near expiry.)
const LN_FLOOR: f64 = -600.0;

impl<'a> Engine<'a> {
    fn cone_tol(pi: &DVector<f64>) -> f64 {
        1e-8 * (1.0 + pi.norm())
    }

    fn prepare(
        params: &MarketParams,
        spec: &ControlSpec<'a>,
        grid: &StepGrid,
    ) -> Result<PreparedControl<'a>> {
        match spec {
            ControlSpec::Zero => Ok(PreparedControl::Zero),
            ControlSpec::Constant(pi) => {
                if pi.len() != params.n_assets() {
                    return Err(SimError::BadConfig(format!(
                        "control has {} components for {} assets",
                        pi.len(),
                        params.n_assets()
                    )));
                }
                if !params.cone().contains(pi, Self::cone_tol(pi)) {
                    return Err(SimError::Control {
                        step: 0,
                        time: 0.0,
                        detail: format!(
                            "constant control {:?} lies outside the trading cone",
                            pi.as_slice()
                        ),
                    });
                }
                let m = params.n_intervals();
                let mut drift = Vec::with_capacity(m);
                let mut vol = Vec::with_capacity(m);
                for k in 0..m {
                    drift.push(pi.dot(params.drift(k)));
                    vol.push(params.volatility(k).transpose() * pi);
                }
                Ok(PreparedControl::Constant { drift, vol })
            }
            ControlSpec::Table { surface, table, mult } => {
                if *mult < 0.0 || !mult.is_finite() {
                    return Err(SimError::BadConfig(format!(
                        "table multiplier must be finite and ≥ 0, got {mult}"
                    )));
                }
                if table.len() != grid.steps() {
                    return Err(SimError::BadConfig(format!(
                        "control table has {} rows for {} steps",
                        table.len(),
                        grid.steps()
                    )));
                }
                let t_end = params.horizon();
                for (i, &t) in grid.left_times().iter().enumerate() {
                    if (table.time(i) - t).abs() > 1e-9 * (1.0 + t_end) {
                        return Err(SimError::BadConfig(format!(
                            "table row {i} tabulated at t = {} but step starts at t = {t}",
                            table.time(i)
                        )));
                    }
                }
                Ok(PreparedControl::Table { surface, table, mult: *mult })
            }
            ControlSpec::General(f) => Ok(PreparedControl::General(*f)),
        }
    }

    /// Advance one unit (one path, or one antithetic mirror of it).
    fn run_leg(&self, draws: &[f64], negate: bool) -> Result<LegOut> {
        let n = self.params.n_assets();
        let sign = if negate { -1.0 } else { 1.0 };
        let mut ln_x = self.x0.ln();
        let mut ln_y = self.y0.ln();
        let mut energy = 0.0;
        let mut fallbacks = 0usize;
        let mut absorbed = false;
        // Held feedback state for strided evaluation.
        let mut held_eff = 0.0;
        let mut held_pi: Option<(f64, DVector<f64>)> = None; // (π'b, σᵀπ)
        for i in 0..self.grid.steps() {
            let t = self.grid.bounds[i];
            let dt = self.grid.bounds[i + 1] - t;
            let k = self.grid.interval[i];
            let dw = &draws[i * n..(i + 1) * n];
            // An absorbed wealth path stays frozen at the floor; only the
            // dual leg keeps moving.
            if let Some(control) = self.control.as_ref().filter(|_| !absorbed) {
                let refresh = i % self.control_stride == 0;
                match control {
                    PreparedControl::Zero => {}
                    PreparedControl::Constant { drift, vol } => {
                        let v = &vol[k];
                        let vol2 = v.norm_squared();
                        let mut diff = 0.0;
                        for j in 0..n {
                            diff += v[j] * dw[j];
                        }
                        ln_x += (drift[k] - 0.5 * vol2) * dt + sign * diff;
                        energy += vol2 * dt;
                    }
                    PreparedControl::Table { surface, table, mult } => {
                        if refresh {
                            let (s, fell_back) =
                                table.scale_or_exact_ln(surface, i, ln_x).map_err(|e| {
                                    SimError::Control {
                                        step: i,
                                        time: t,
                                        detail: format!("feedback solve failed: {e}"),
                                    }
                                })?;
                            if !(s >= 0.0) || !s.is_finite() {
                                return Err(SimError::Control {
                                    step: i,
                                    time: t,
                                    detail: format!("feedback weight {s} left the cone ray"),
                                });
                            }
                            fallbacks += usize::from(fell_back);
                            held_eff = mult * s;
                        }
                        let em = self.effective.expect("table control requires market");
                        let speed2 = em.speed2_at(t);
                        let theta_hat = em.theta_hat(k);
                        let mut diff = 0.0;
                        for j in 0..n {
                            diff += theta_hat[j] * dw[j];
                        }
                        let vol2 = held_eff * held_eff * speed2;
                        ln_x += (held_eff * speed2 - 0.5 * vol2) * dt
                            + sign * held_eff * diff;
                        energy += vol2 * dt;
                    }
                    PreparedControl::General(f) => {
                        if refresh || held_pi.is_none() {
                            let pi = f(i, t, ln_x.exp());
                            if pi.len() != n || pi.iter().any(|c| !c.is_finite()) {
                                return Err(SimError::Control {
                                    step: i,
                                    time: t,
                                    detail: "malformed control vector".to_string(),
                                });
                            }
                            if !self.params.cone().contains(&pi, Self::cone_tol(&pi)) {
                                return Err(SimError::Control {
                                    step: i,
                                    time: t,
                                    detail: format!(
                                        "control {:?} lies outside the trading cone",
                                        pi.as_slice()
                                    ),
                                });
                            }
                            held_pi = Some((
                                pi.dot(self.params.drift(k)),
                                self.params.volatility(k).transpose() * &pi,
                            ));
                        }
                        let (drift, v) = held_pi.as_ref().unwrap();
                        let vol2 = v.norm_squared();
                        let mut diff = 0.0;
                        for j in 0..n {
                            diff += v[j] * dw[j];
                        }
                        ln_x += (drift - 0.5 * vol2) * dt + sign * diff;
                        energy += vol2 * dt;
                    }
                }
            }
            if self.control.is_some() && ln_x < LN_FLOOR && !absorbed {
                ln_x = LN_FLOOR;
                absorbed = true;
            }
            if let Some(em) = self.effective {
                if self.y0.is_finite() && self.y0 > 0.0 {
                    let speed2 = em.speed2_at(t);
                    let theta_hat = em.theta_hat(k);
                    let mut diff = 0.0;
                    for j in 0..n {
                        diff += theta_hat[j] * dw[j];
                    }
                    ln_y += -sign * diff - 0.5 * speed2 * dt;
                }
            }
        }
        Ok(LegOut { ln_x, ln_y, energy, fallbacks, absorbed })
    }

    fn run(&self, cfg: &SimConfig) -> Result<PathBatchResult> {
        let n = self.params.n_assets();
        let steps = self.grid.steps();
        let units = if cfg.antithetic { cfg.paths / 2 } else { cfg.paths };
        let legs: Vec<(LegOut, Option<LegOut>)> = (0..units as u64)
            .into_par_iter()
            .map(|u| {
                let mut rng = unit_rng(cfg.seed, u);
                let mut draws = vec![0.0f64; steps * n];
                for i in 0..steps {
                    let sdt = (self.grid.bounds[i + 1] - self.grid.bounds[i]).sqrt();
                    for j in 0..n {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        draws[i * n + j] = g * sdt;
                    }
                }
                let a = self.run_leg(&draws, false)?;
                let b = if cfg.antithetic {
                    Some(self.run_leg(&draws, true)?)
                } else {
                    None
                };
                Ok((a, b))
            })
            .collect::<Result<Vec<_>>>()?;

        let has_wealth = self.control.is_some();
        let has_dual = self.effective.is_some() && self.y0 > 0.0 && self.y0.is_finite();
        let mut wealth = Vec::new();
        let mut dual = Vec::new();
        let mut energy = Vec::new();
        let mut fallbacks = 0usize;
        let mut absorbed = 0usize;
        let mut push = |leg: &LegOut| {
            if has_wealth {
                wealth.push(leg.ln_x.exp());
                energy.push(leg.energy);
            }
            if has_dual {
                dual.push(leg.ln_y.exp());
            }
            fallbacks += leg.fallbacks;
            absorbed += usize::from(leg.absorbed);
        };
        for (a, b) in &legs {
            push(a);
            if let Some(b) = b {
                push(b);
            }
        }
        let primary: &[f64] = if has_wealth { &wealth } else { &dual };
        let (mean, se) = mean_se(primary, cfg.antithetic);
        Ok(PathBatchResult {
            wealth,
            dual,
            control_energy: energy,
            table_fallbacks: fallbacks,
            absorbed,
            mean,
            se,
        })
    }
}

/// Counter-based per-unit RNG stream: stateless in `(seed, unit index)`.
fn unit_rng(seed: u64, unit: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&unit.to_le_bytes());
    // Fixed domain tag so other derivations can never collide.
    bytes[16..24].copy_from_slice(&0x5d0a_11ce_90b5_7a31u64.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

// ----------------------------------------------------------------------
// public operations
// ----------------------------------------------------------------------

/// Simulate the wealth SDE under a feedback control. For the tabulated
/// optimal control the market inside `surface` must be the same one `mp`
/// describes.
pub fn simulate_wealth(
    mp: &MarketParams,
    control: &ControlSpec,
    x0: f64,
    cfg: &SimConfig,
) -> Result<PathBatchResult> {
    let cfg = cfg.validated()?;
    if !(x0 > 0.0) || !x0.is_finite() {
        return Err(SimError::BadConfig(format!("x0 must be positive, got {x0}")));
    }
    let grid = StepGrid::build(mp, cfg.steps_per_year);
    let effective = match control {
        ControlSpec::Table { surface, .. } => {
            let em = surface.market();
            if em.params().grid() != mp.grid() || em.params().n_assets() != mp.n_assets() {
                return Err(SimError::BadConfig(
                    "tabulated control belongs to a different market".to_string(),
                ));
            }
            Some(em)
        }
        _ => None,
    };
    let prepared = Engine::prepare(mp, control, &grid)?;
    Engine {
        params: mp,
        effective,
        grid,
        control: Some(prepared),
        x0,
        y0: f64::NAN,
        control_stride: 1,
    }
    .run(&cfg)
}

/// Simulate the dual SDE `dŶ = −Ŷ θ̂'dW`; each step update is exact in law.
pub fn simulate_dual(em: &EffectiveMarket, y0: f64, cfg: &SimConfig) -> Result<PathBatchResult> {
    let cfg = cfg.validated()?;
    if !(y0 > 0.0) || !y0.is_finite() {
        return Err(SimError::BadConfig(format!("y0 must be positive, got {y0}")));
    }
    let grid = StepGrid::build(em.params(), cfg.steps_per_year);
    Engine {
        params: em.params(),
        effective: Some(em),
        grid,
        control: None,
        x0: 1.0,
        y0,
        control_stride: 1,
    }
    .run(&cfg)
}

/// Simulate wealth and dual legs on shared increments (for the pairing
/// check `E[X_T Ŷ_T] = x0·y0` under the optimal pair).
pub fn simulate_pair(
    em: &EffectiveMarket,
    control: &ControlSpec,
    x0: f64,
    y0: f64,
    cfg: &SimConfig,
) -> Result<PathBatchResult> {
    let cfg = cfg.validated()?;
    if !(x0 > 0.0) || !(y0 > 0.0) || !x0.is_finite() || !y0.is_finite() {
        return Err(SimError::BadConfig("x0 and y0 must be positive".to_string()));
    }
    let grid = StepGrid::build(em.params(), cfg.steps_per_year);
    let prepared = Engine::prepare(em.params(), control, &grid)?;
    Engine {
        params: em.params(),
        effective: Some(em),
        grid,
        control: Some(prepared),
        x0,
        y0,
        control_stride: 1,
    }
    .run(&cfg)
}

/// Build the per-step control table the simulator consumes: one row per
/// step left endpoint.
pub fn build_step_table(
    ps: &PrimalSurface,
    cfg: &SimConfig,
    x0: f64,
    nodes: usize,
) -> Result<ControlTable> {
    let grid = StepGrid::build(ps.market().params(), cfg.steps_per_year);
    Ok(ControlTable::build(ps, grid.left_times(), x0, 10.0, nodes)?)
}

/// One verification entry: a named control, the estimator of `E[U(X_T)]`,
/// and its distance from `u(0,x0)` in standard errors.
#[derive(Debug, Clone)]
pub struct VerifyEntry {
    pub name: &'static str,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
    pub batch: PathBatchResult,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    /// `u(0, x0)` from the surface.
    pub value0: f64,
    pub entries: Vec<VerifyEntry>,
    pub checks: CheckReport,
}

/// Simulate the optimal feedback plus a basket of suboptimal controls
/// (zero, half- and double-optimal) and test the verification inequalities:
/// the optimal mean matches `u(0,x0)` within `tol_se` standard errors and
/// every mean stays below `u(0,x0) + tol_se·se`.
pub fn verify_value(
    ps: &PrimalSurface,
    cfg: &SimConfig,
    x0: f64,
    table_nodes: usize,
    tol_se: f64,
) -> Result<VerificationReport> {
    let value0 = ps.value(0.0, x0)?;
    let table = build_step_table(ps, cfg, x0, table_nodes)?;
    let utility = ps.utility();
    let params = ps.market().params().clone();
    let mut entries = Vec::new();
    let mut checks = CheckReport::new();
    let variants: [(&'static str, ControlSpec); 4] = [
        ("optimal", ControlSpec::Table { surface: ps, table: &table, mult: 1.0 }),
        ("zero", ControlSpec::Zero),
        ("half-optimal", ControlSpec::Table { surface: ps, table: &table, mult: 0.5 }),
        ("double-optimal", ControlSpec::Table { surface: ps, table: &table, mult: 2.0 }),
    ];
    for (name, spec) in variants {
        let batch = simulate_wealth(&params, &spec, x0, cfg)?;
        let rewards: Vec<f64> = batch.wealth.iter().map(|&x| utility.eval(x)).collect();
        let (mean, se) = mean_se(&rewards, cfg.antithetic);
        let z = (mean - value0) / se;
        if name == "optimal" {
            checks.push(CheckResult::from_bool(
                "optimal-mean-matches-value",
                z.abs() <= tol_se,
                format!("E[U(X_T)] = {mean:.6e} vs u(0,x0) = {value0:.6e} ({z:+.2} se)"),
            ));
        } else {
            checks.push(CheckResult::from_bool(
                match name {
                    "zero" => "zero-below-value",
                    "half-optimal" => "half-below-value",
                    _ => "double-below-value",
                },
                z <= tol_se,
                format!("E[U(X_T)] = {mean:.6e} ≤ u + {tol_se} se (z = {z:+.2})"),
            ));
        }
        checks.push(CheckResult::from_bool(
            match name {
                "optimal" => "optimal-positive-wealth",
                "zero" => "zero-positive-wealth",
                "half-optimal" => "half-positive-wealth",
                _ => "double-positive-wealth",
            },
            batch.wealth.iter().all(|&x| x > 0.0),
            "every terminal wealth sample is strictly positive",
        ));
        entries.push(VerifyEntry { name, mean, se, z, batch });
    }
    Ok(VerificationReport { value0, entries, checks })
}

#[derive(Debug, Clone)]
pub struct PairingEntry {
    pub name: &'static str,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct PairingReport {
    /// `x0 · y*` with `y* = u_x(0, x0)`.
    pub target: f64,
    pub y_star: f64,
    pub entries: Vec<PairingEntry>,
    pub checks: CheckReport,
}

/// Duality pairing on shared increments: under the optimal control
/// `E[X_T Ŷ_T] = x0 y*` (martingale), under any admissible control the
/// product is a supermartingale, so the mean must not exceed the target.
pub fn duality_pairing_check(
    ps: &PrimalSurface,
    cfg: &SimConfig,
    x0: f64,
    table_nodes: usize,
    tol_se: f64,
) -> Result<PairingReport> {
    let y_star = ps.derivs(0.0, x0)?.dx;
    let target = x0 * y_star;
    let em = ps.market();
    let table = build_step_table(ps, cfg, x0, table_nodes)?;
    let mut entries = Vec::new();
    let mut checks = CheckReport::new();
    let variants: [(&'static str, ControlSpec, bool); 3] = [
        ("optimal", ControlSpec::Table { surface: ps, table: &table, mult: 1.0 }, true),
        ("zero", ControlSpec::Zero, true),
        ("double-optimal", ControlSpec::Table { surface: ps, table: &table, mult: 2.0 }, false),
    ];
    for (name, spec, two_sided) in variants {
        let batch = simulate_pair(em, &spec, x0, y_star, cfg)?;
        let products: Vec<f64> =
            batch.wealth.iter().zip(&batch.dual).map(|(&x, &y)| x * y).collect();
        let (mean, se) = mean_se(&products, cfg.antithetic);
        let z = (mean - target) / se;
        let (ok, claim) = if two_sided {
            (z.abs() <= tol_se, "martingale pairing")
        } else {
            (z <= tol_se, "supermartingale pairing")
        };
        checks.push(CheckResult::from_bool(
            match name {
                "optimal" => "optimal-pairing-martingale",
                "zero" => "zero-pairing-martingale",
                _ => "double-pairing-supermartingale",
            },
            ok,
            format!("{claim}: E[X_T Ŷ_T] = {mean:.6e} vs {target:.6e} (z = {z:+.2})"),
        ));
        entries.push(PairingEntry { name, mean, se, z });
    }
    Ok(PairingReport { target, y_star, entries, checks })
}

/// Scheme-convergence check on identical increments: refreshing the
/// feedback every step versus every other step must move `E[U(X_T)]` by
/// less than one standard error. Shared noise isolates the discretization
/// difference, so this is a sharp test despite the small threshold.
pub fn scheme_convergence_check(
    ps: &PrimalSurface,
    cfg: &SimConfig,
    x0: f64,
    table_nodes: usize,
) -> Result<CheckReport> {
    let cfg = cfg.validated()?;
    let table = build_step_table(ps, &cfg, x0, table_nodes)?;
    let params = ps.market().params();
    let utility = ps.utility();
    let mut means = [0.0f64; 2];
    let mut se_fine = 0.0;
    for (slot, stride) in [(0usize, 1usize), (1, 2)] {
        let grid = StepGrid::build(params, cfg.steps_per_year);
        let prepared = Engine::prepare(
            params,
            &ControlSpec::Table { surface: ps, table: &table, mult: 1.0 },
            &grid,
        )?;
        let batch = Engine {
            params,
            effective: Some(ps.market()),
            grid,
            control: Some(prepared),
            x0,
            y0: f64::NAN,
            control_stride: stride,
        }
        .run(&cfg)?;
        let rewards: Vec<f64> = batch.wealth.iter().map(|&x| utility.eval(x)).collect();
        let (mean, se) = mean_se(&rewards, cfg.antithetic);
        means[slot] = mean;
        if stride == 1 {
            se_fine = se;
        }
    }
    let mut report = CheckReport::new();
    let delta = (means[0] - means[1]).abs();
    report.push(CheckResult::from_bool(
        "halving-step-within-one-se",
        delta < se_fine,
        format!("Δmean = {delta:.3e} vs se = {se_fine:.3e}"),
    ));
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct NovikovReport {
    /// Sample mean of `exp(½∫|π'σ|²dt)`.
    pub mean: f64,
    pub max: f64,
    /// `max / mean`; large values hint at a heavy tail.
    pub ratio: f64,
    /// Any statistic hit the overflow clamp.
    pub overflowed: bool,
    /// Heuristic divergence flag (growth across batch prefixes, extreme
    /// ratio, or overflow). Evidence, not proof.
    pub suspicious: bool,
    pub detail: String,
}

/// Integrability diagnostic for the realized control energies: statistics
/// of `exp(½∫|π'σ|²dt)`. Heuristic only — boundedness of the sample says
/// nothing conclusive about the expectation's finiteness.
pub fn novikov_diagnostic(batch: &PathBatchResult) -> NovikovReport {
    const CLAMP: f64 = 700.0;
    let mut overflowed = false;
    let stats: Vec<f64> = batch
        .control_energy
        .iter()
        .map(|&e| {
            let half = 0.5 * e;
            if half > CLAMP {
                overflowed = true;
                CLAMP.exp()
            } else {
                half.exp()
            }
        })
        .collect();
    if stats.is_empty() {
        return NovikovReport {
            mean: f64::NAN,
            max: f64::NAN,
            ratio: f64::NAN,
            overflowed: false,
            suspicious: false,
            detail: "no control energies recorded".to_string(),
        };
    }
    let (mean, _) = mean_and_se(&stats);
    let max = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let half_mean = {
        let half = &stats[..stats.len().div_ceil(2)];
        half.iter().sum::<f64>() / half.len() as f64
    };
    let ratio = max / mean;
    let growing = mean > 1.5 * half_mean;
    let suspicious = overflowed || growing || ratio > 1e3;
    NovikovReport {
        mean,
        max,
        ratio,
        overflowed,
        suspicious,
        detail: format!(
            "mean = {mean:.6e}, max = {max:.6e}, ratio = {ratio:.3e}, \
             prefix mean = {half_mean:.6e}{}",
            if overflowed { ", clamped at overflow" } else { "" }
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{DualSurface, QuadratureConfig};
    use crate::market::ConeSpec;
    use crate::utility::{kinked_min_sqrt, UtilityFunction};
    use approx::assert_relative_eq;

    fn merton_params() -> MarketParams {
        MarketParams::scalar(1.0, 0.2, 0.4, ConeSpec::WholeSpace, 0.1).unwrap()
    }

    fn merton_surface() -> PrimalSurface {
        let dual = UtilityFunction::power(1.0, 0.5).unwrap().conjugate().unwrap();
        let surface = DualSurface::with_quadrature(
            merton_params().effective().unwrap(),
            dual,
            QuadratureConfig::coarse(),
        )
        .unwrap();
        PrimalSurface::new(surface).unwrap()
    }

    fn kinked_surface() -> PrimalSurface {
        let dual = kinked_min_sqrt().conjugate().unwrap();
        let surface = DualSurface::with_quadrature(
            merton_params().effective().unwrap(),
            dual,
            QuadratureConfig::coarse(),
        )
        .unwrap();
        PrimalSurface::new(surface).unwrap()
    }

    fn small_cfg() -> SimConfig {
        SimConfig { paths: 4000, steps_per_year: 50, seed: 42, antithetic: false }
    }

    #[test]
    fn zero_control_is_inert() {
        let mp = merton_params();
        let cfg = SimConfig { paths: 64, steps_per_year: 16, seed: 1, antithetic: false };
        let batch = simulate_wealth(&mp, &ControlSpec::Zero, 3.5, &cfg).unwrap();
        assert_eq!(batch.wealth.len(), 64);
        assert!(batch.wealth.iter().all(|&x| x == 3.5));
        assert!(batch.control_energy.iter().all(|&e| e == 0.0));
        let nov = novikov_diagnostic(&batch);
        assert_eq!(nov.mean, 1.0);
        assert_eq!(nov.max, 1.0);
        assert!(!nov.suspicious);
    }

    #[test]
    fn constant_merton_moment_and_determinism() {
        let mp = merton_params();
        let cfg = SimConfig { paths: 20_000, steps_per_year: 50, seed: 11, antithetic: false };
        let pi = DVector::from_vec(vec![2.5]);
        let x0 = 1.7f64;
        let batch = simulate_wealth(&mp, &ControlSpec::Constant(pi.clone()), x0, &cfg).unwrap();
        // ln X_T ~ N(ln x0 + (πb − ½π²σ²)T, π²σ²T) = N(ln x0, 1):
        // E[√X_T] = √x0·e^{1/8}.
        let rewards: Vec<f64> = batch.wealth.iter().map(|&x| x.sqrt()).collect();
        let (mean, se) = mean_se(&rewards, cfg.antithetic);
        let expect = x0.sqrt() * (0.125f64).exp();
        assert!(
            (mean - expect).abs() <= 3.0 * se,
            "mean {mean} vs {expect} (se {se})"
        );
        // The realized energy is deterministic for a constant control.
        let energy = 2.5f64 * 2.5 * 0.4 * 0.4;
        assert_relative_eq!(batch.control_energy[17], energy, max_relative = 1e-12);
        let nov = novikov_diagnostic(&batch);
        assert_relative_eq!(nov.mean, (0.5 * energy).exp(), max_relative = 1e-12);
        assert_relative_eq!(nov.ratio, 1.0, max_relative = 1e-12);
        assert!(!nov.suspicious);
        // Bit determinism.
        let again = simulate_wealth(&mp, &ControlSpec::Constant(pi), x0, &cfg).unwrap();
        assert_eq!(batch.mean.to_bits(), again.mean.to_bits());
        assert_eq!(batch.wealth, again.wealth);
    }

    #[test]
    fn antithetic_pairs_mirror_and_count() {
        let mp = merton_params();
        let cfg = SimConfig { paths: 2000, steps_per_year: 25, seed: 5, antithetic: true };
        let pi = DVector::from_vec(vec![1.0]);
        let x0 = 2.0f64;
        let batch = simulate_wealth(&mp, &ControlSpec::Constant(pi), x0, &cfg).unwrap();
        assert_eq!(batch.wealth.len(), 2000);
        // For a constant control the mirrored pair multiplies to a
        // deterministic constant: X_a·X_b = x0²·e^{2(πb−½π²σ²)T}.
        let expect = x0 * x0 * (2.0f64 * (0.2 - 0.5 * 0.16)).exp();
        for pair in batch.wealth.chunks_exact(2).take(5) {
            assert_relative_eq!(pair[0] * pair[1], expect, max_relative = 1e-10);
        }
        assert!(SimConfig { paths: 3, ..cfg }.validated().is_err());
    }

    #[test]
    fn dual_martingale_and_moment_and_value() {
        let ks = kinked_surface();
        let em = ks.market();
        let cfg = SimConfig { paths: 20_000, steps_per_year: 50, seed: 9, antithetic: true };
        let y0 = 0.8f64;
        let batch = simulate_dual(em, y0, &cfg).unwrap();
        assert_eq!(batch.dual.len(), 20_000);
        assert!(batch.wealth.is_empty());
        // Martingale: E[Ŷ_T] = y0.
        assert!(
            (batch.mean - y0).abs() <= 3.0 * batch.se,
            "mean {} vs {y0} (se {})",
            batch.mean,
            batch.se
        );
        // Lognormal moment: E[Ŷ_T⁻¹] = y0⁻¹ e^{2τ(0)}.
        let inv: Vec<f64> = batch.dual.iter().map(|&y| 1.0 / y).collect();
        let (mean_inv, se_inv) = mean_se(&inv, cfg.antithetic);
        let expect = (2.0 * em.total_tau()).exp() / y0;
        assert!(
            (mean_inv - expect).abs() <= 3.0 * se_inv,
            "mean {mean_inv} vs {expect} (se {se_inv})"
        );
        // E[Ũ(Ŷ_T)] = V̂(0, y0).
        let du = ks.dual().dual_utility();
        let payoff: Vec<f64> = batch.dual.iter().map(|&y| du.eval(y)).collect();
        let (mean_u, se_u) = mean_se(&payoff, cfg.antithetic);
        let expect_v = ks.dual().value(0.0, y0);
        assert!(
            (mean_u - expect_v).abs() <= 3.0 * se_u,
            "mean {mean_u} vs {expect_v} (se {se_u})"
        );
    }

    #[test]
    fn verification_basket_merton() {
        let ps = merton_surface();
        let report = verify_value(&ps, &small_cfg(), 1.0, 65, 3.0).unwrap();
        assert!(report.checks.passed(), "{}", report.checks.summary());
        assert_eq!(report.entries.len(), 4);
        // The suboptimal means must sit strictly below with real margin.
        let u0 = report.value0;
        for e in &report.entries {
            if e.name != "optimal" {
                assert!(e.mean < u0, "{}: {} ≥ {u0}", e.name, e.mean);
            }
        }
    }

    #[test]
    fn verification_basket_kinked() {
        let ps = kinked_surface();
        let report = verify_value(&ps, &small_cfg(), 1.0, 65, 3.0).unwrap();
        assert!(report.checks.passed(), "{}", report.checks.summary());
    }

    #[test]
    fn pairing_martingale_and_supermartingale() {
        let ps = merton_surface();
        let report = duality_pairing_check(&ps, &small_cfg(), 1.3, 65, 3.0).unwrap();
        assert!(report.checks.passed(), "{}", report.checks.summary());
        assert_relative_eq!(
            report.target,
            1.3 * ps.derivs(0.0, 1.3).unwrap().dx,
            max_relative = 1e-14
        );
    }

    #[test]
    fn scheme_convergence_on_shared_noise() {
        let ps = kinked_surface();
        let cfg = SimConfig { paths: 8000, steps_per_year: 50, seed: 3, antithetic: false };
        let report = scheme_convergence_check(&ps, &cfg, 1.0, 65).unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn inadmissible_controls_are_named() {
        let mp = MarketParams::scalar(1.0, 0.2, 0.4, ConeSpec::NonnegOrthant, 0.1).unwrap();
        let cfg = SimConfig { paths: 8, steps_per_year: 8, seed: 1, antithetic: false };
        let bad = DVector::from_vec(vec![-1.0]);
        let err = simulate_wealth(&mp, &ControlSpec::Constant(bad), 1.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
        // A feedback that turns inadmissible mid-run names the step.
        let f = |_i: usize, t: f64, _x: f64| {
            DVector::from_vec(vec![if t < 0.5 { 1.0 } else { -2.0 }])
        };
        let err = simulate_wealth(&mp, &ControlSpec::General(&f), 1.0, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 4") && msg.contains("0.5"), "{msg}");
    }

    #[test]
    fn results_are_bit_stable_across_worker_counts() {
        let ps = merton_surface();
        let cfg = SimConfig { paths: 2000, steps_per_year: 20, seed: 77, antithetic: false };
        let run = || {
            let table = build_step_table(&ps, &cfg, 1.0, 33).unwrap();
            let spec = ControlSpec::Table { surface: &ps, table: &table, mult: 1.0 };
            simulate_wealth(ps.market().params(), &spec, 1.0, &cfg).unwrap()
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let three = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(one.mean.to_bits(), three.mean.to_bits());
        assert_eq!(one.se.to_bits(), three.se.to_bits());
        assert_eq!(one.wealth, three.wealth);
        assert_eq!(one.dual, three.dual);
    }
}
