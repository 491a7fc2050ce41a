//! Scenario configuration: the JSON schema, semantic validation with
//! field-path error messages, default filling, and conversion into the
//! library's domain types.
//!
//! Parsing is strict: unknown keys are rejected by the deserializer (with
//! line/column positions), and every semantic rule failure names the field
//! path it arose from (e.g. `market.volatility[0]`). After [`parse_config`]
//! succeeds the configuration is *normalized*: every optional block is
//! present with its defaults filled, so serializing it back echoes the
//! effective configuration and yields a canonical byte string for the
//! scenario fingerprint.

use dualhjb::market::{ConeSpec, MarketParams};
use dualhjb::utility::{kinked_min_sqrt, ConcaveBranch, UtilityFunction, ValidationConfig};
use dualhjb::{QuadratureConfig, SimConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A configuration problem: syntax/unknown-key errors carry the parser's
/// line and column; semantic errors carry the offending field path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(path: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(ConfigError(format!("{path}: {msg}")))
}

fn fin(v: f64) -> bool {
    v.is_finite()
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub market: MarketBlock,
    pub utility: UtilityBlock,
    #[serde(default)]
    pub quadrature: QuadratureBlock,
    #[serde(default)]
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub application: ApplicationBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_theta_floor() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    /// Single-interval shorthand: coefficients constant on `[0, horizon]`.
    /// Mutually exclusive with `grid`; normalization folds it into `grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Explicit increasing time grid `0 = t_0 < … < t_m = T`; coefficients
    /// are piecewise constant per interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    /// Per-interval excess-return vectors (length n each).
    pub drift: Vec<Vec<f64>>,
    /// Per-interval n×n volatility matrices, row-major nested arrays.
    pub volatility: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub cone: ConeBlock,
    /// Uniform lower bound required of `|θ̂(t)|`.
    #[serde(default = "default_theta_floor")]
    pub theta_floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeBlock {
    /// One of `whole_space`, `nonneg_orthant`, `finitely_generated`,
    /// `half_spaces`.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vec<f64>>>,
}

impl Default for ConeBlock {
    fn default() -> Self {
        ConeBlock { kind: "whole_space".to_string(), generators: None, normals: None }
    }
}

/// Utility family selector plus per-family parameters. A plain struct with
/// optional fields (rather than a tagged enum) so that unknown keys are
/// rejected reliably and misplaced fields get named errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityBlock {
    /// One of `power`, `power_sum`, `kinked_min_sqrt`, `min_of_pieces`,
    /// `tabulated`.
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    /// `(coefficient, exponent)` pairs for `power_sum`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<(f64, f64)>>,
    /// Concave branches in activity order for `min_of_pieces`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<BranchBlock>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ys: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_exponent: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchBlock {
    /// `affine` or `power_terms`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
}

fn default_half_width() -> f64 {
    8.0
}

fn default_nodes() -> usize {
    4001
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureBlock {
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

impl Default for QuadratureBlock {
    fn default() -> Self {
        QuadratureBlock { half_width: default_half_width(), nodes: default_nodes() }
    }
}

fn default_paths() -> usize {
    100_000
}

fn default_steps() -> usize {
    250
}

fn default_x0() -> f64 {
    1.0
}

fn default_table_nodes() -> usize {
    129
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps_per_year: usize,
    #[serde(default)]
    pub antithetic: bool,
    /// Initial wealth for simulations and the CVaR anchor `x₀`.
    #[serde(default = "default_x0")]
    pub x0: f64,
    /// Wealth nodes per row of the tabulated feedback control.
    #[serde(default = "default_table_nodes")]
    pub table_nodes: usize,
}

impl Default for SimulationBlock {
    fn default() -> Self {
        SimulationBlock {
            paths: default_paths(),
            steps_per_year: default_steps(),
            antithetic: false,
            x0: default_x0(),
            table_nodes: default_table_nodes(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvar: Option<CvarBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskBlock>,
    /// Evaluation grids for the surface/control dumps; defaults derived
    /// from the horizon and `simulation.x0` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceBlock>,
}

fn default_y_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvarBlock {
    /// Tail level β of the conditional value-at-risk.
    pub beta: f64,
    /// Trade-off weights λ of the frontier sweep.
    pub lambdas: Vec<f64>,
    /// Tolerance of the outer scalar maximization over the shift variable.
    #[serde(default = "default_y_tol")]
    pub y_tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wealth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<f64>>,
}

fn default_out_dir() -> String {
    "out".to_string()
}

fn default_formats() -> Vec<String> {
    vec!["csv".to_string()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: default_out_dir(), formats: default_formats() }
    }
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

/// Parse, validate, and normalize a scenario configuration. Syntax errors
/// and unknown keys surface with line/column; semantic errors with field
/// paths. The returned configuration has all defaults filled.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
    cfg.validated()
}

impl ScenarioConfig {
    /// Semantic validation and normalization (see [`parse_config`]).
    pub fn validated(mut self) -> Result<Self> {
        self.validate_market()?;
        self.validate_utility()?;
        QuadratureConfig { half_width: self.quadrature.half_width, nodes: self.quadrature.nodes }
            .validated()
            .map_err(|e| ConfigError(format!("quadrature: {e}")))?;
        self.validate_simulation()?;
        self.validate_application()?;
        for f in &self.output.formats {
            if f != "csv" {
                return err("output.formats", format_args!("only \"csv\" is supported, got \"{f}\""));
            }
        }
        Ok(self)
    }

    fn validate_market(&mut self) -> Result<()> {
        let grid = match (self.market.horizon.take(), self.market.grid.take()) {
            (Some(h), None) => {
                if !(h > 0.0) || !fin(h) {
                    return err("market.horizon", format_args!("must be positive and finite, got {h}"));
                }
                vec![0.0, h]
            }
            (None, Some(g)) => g,
            (Some(_), Some(_)) => return err("market", "give either horizon or grid, not both"),
            (None, None) => return err("market", "one of horizon or grid is required"),
        };
        if grid.len() < 2 || grid[0] != 0.0 {
            return err("market.grid", "must start at 0 and contain at least two knots");
        }
        if !grid.windows(2).all(|w| w[1] > w[0] && fin(w[1])) {
            return err("market.grid", "must be strictly increasing and finite");
        }
        let m = grid.len() - 1;
        self.market.grid = Some(grid);
        if self.market.drift.len() != m {
            return err(
                "market.drift",
                format_args!("expected {m} interval vectors, got {}", self.market.drift.len()),
            );
        }
        if self.market.volatility.len() != m {
            return err(
                "market.volatility",
                format_args!("expected {m} interval matrices, got {}", self.market.volatility.len()),
            );
        }
        let n = self.market.drift[0].len();
        if n == 0 {
            return err("market.drift[0]", "need at least one asset");
        }
        for (k, d) in self.market.drift.iter().enumerate() {
            if d.len() != n {
                return err(
                    &format!("market.drift[{k}]"),
                    format_args!("expected length {n}, got {}", d.len()),
                );
            }
            if !d.iter().all(|v| fin(*v)) {
                return err(&format!("market.drift[{k}]"), "entries must be finite");
            }
        }
        for (k, s) in self.market.volatility.iter().enumerate() {
            if s.len() != n || s.iter().any(|row| row.len() != n) {
                return err(
                    &format!("market.volatility[{k}]"),
                    format_args!("must be an {n}×{n} matrix"),
                );
            }
            if !s.iter().flatten().all(|v| fin(*v)) {
                return err(&format!("market.volatility[{k}]"), "entries must be finite");
            }
        }
        let tf = self.market.theta_floor;
        if !(tf > 0.0) || !fin(tf) {
            return err("market.theta_floor", format_args!("must be positive and finite, got {tf}"));
        }
        let cone = &self.market.cone;
        match cone.kind.as_str() {
            "whole_space" | "nonneg_orthant" => {
                if cone.generators.is_some() || cone.normals.is_some() {
                    return err(
                        "market.cone",
                        format_args!("\"{}\" takes no generators or normals", cone.kind),
                    );
                }
            }
            "finitely_generated" => {
                if cone.normals.is_some() {
                    return err("market.cone.normals", "not used by finitely_generated");
                }
                match &cone.generators {
                    None => return err("market.cone.generators", "required for finitely_generated"),
                    Some(g) if g.is_empty() => {
                        return err("market.cone.generators", "need at least one generator")
                    }
                    Some(g) => check_rays(g, n, "market.cone.generators")?,
                }
            }
            "half_spaces" => {
                if cone.generators.is_some() {
                    return err("market.cone.generators", "not used by half_spaces");
                }
                match &cone.normals {
                    None => return err("market.cone.normals", "required for half_spaces"),
                    Some(g) if g.is_empty() => {
                        return err("market.cone.normals", "need at least one normal")
                    }
                    Some(g) => check_rays(g, n, "market.cone.normals")?,
                }
            }
            other => {
                return err(
                    "market.cone.type",
                    format_args!(
                        "unknown cone \"{other}\" (expected whole_space, nonneg_orthant, \
                         finitely_generated, or half_spaces)"
                    ),
                )
            }
        }
        Ok(())
    }

    fn validate_utility(&mut self) -> Result<()> {
        let u = &mut self.utility;
        let family = u.family.clone();
        let forbid = |opt_given: bool, path: &str| -> Result<()> {
            if opt_given {
                err(path, format_args!("not used by family \"{family}\""))
            } else {
                Ok(())
            }
        };
        match u.family.as_str() {
            "power" => {
                forbid(u.terms.is_some(), "utility.terms")?;
                forbid(u.branches.is_some(), "utility.branches")?;
                forbid(u.xs.is_some(), "utility.xs")?;
                forbid(u.ys.is_some(), "utility.ys")?;
                forbid(u.tail_exponent.is_some(), "utility.tail_exponent")?;
                let p = match u.exponent {
                    Some(p) => p,
                    None => return err("utility.exponent", "required for family \"power\""),
                };
                if !(p > 0.0 && p < 1.0) {
                    return err("utility.exponent", format_args!("p must lie in (0,1), got {p}"));
                }
                let scale = *u.scale.get_or_insert(1.0);
                if !(scale > 0.0) || !fin(scale) {
                    return err("utility.scale", format_args!("must be positive and finite, got {scale}"));
                }
            }
            "power_sum" => {
                forbid(u.scale.is_some(), "utility.scale")?;
                forbid(u.exponent.is_some(), "utility.exponent")?;
                forbid(u.branches.is_some(), "utility.branches")?;
                forbid(u.xs.is_some(), "utility.xs")?;
                forbid(u.ys.is_some(), "utility.ys")?;
                forbid(u.tail_exponent.is_some(), "utility.tail_exponent")?;
                let terms = match &u.terms {
                    Some(t) if !t.is_empty() => t,
                    _ => return err("utility.terms", "at least one (coefficient, exponent) pair is required"),
                };
                for (i, &(c, p)) in terms.iter().enumerate() {
                    if !(c > 0.0) || !fin(c) {
                        return err(
                            &format!("utility.terms[{i}]"),
                            format_args!("coefficient must be positive and finite, got {c}"),
                        );
                    }
                    if !(p > 0.0 && p < 1.0) {
                        return err(
                            &format!("utility.terms[{i}]"),
                            format_args!("p must lie in (0,1), got {p}"),
                        );
                    }
                }
            }
            "kinked_min_sqrt" => {
                forbid(u.scale.is_some(), "utility.scale")?;
                forbid(u.exponent.is_some(), "utility.exponent")?;
                forbid(u.terms.is_some(), "utility.terms")?;
                forbid(u.branches.is_some(), "utility.branches")?;
                forbid(u.xs.is_some(), "utility.xs")?;
                forbid(u.ys.is_some(), "utility.ys")?;
                forbid(u.tail_exponent.is_some(), "utility.tail_exponent")?;
            }
            "min_of_pieces" => {
                forbid(u.scale.is_some(), "utility.scale")?;
                forbid(u.exponent.is_some(), "utility.exponent")?;
                forbid(u.terms.is_some(), "utility.terms")?;
                forbid(u.xs.is_some(), "utility.xs")?;
                forbid(u.ys.is_some(), "utility.ys")?;
                forbid(u.tail_exponent.is_some(), "utility.tail_exponent")?;
                let branches = match &mut u.branches {
                    Some(b) if !b.is_empty() => b,
                    _ => return err("utility.branches", "at least one branch is required"),
                };
                for (i, b) in branches.iter_mut().enumerate() {
                    let path = format!("utility.branches[{i}]");
                    match b.kind.as_str() {
                        "affine" => {
                            if b.terms.is_some() || b.offset.is_some() {
                                return err(&path, "affine branches take slope and intercept only");
                            }
                            let s = match b.slope {
                                Some(s) => s,
                                None => return err(&path, "slope is required for affine branches"),
                            };
                            if !(s > 0.0) || !fin(s) {
                                return err(
                                    &format!("{path}.slope"),
                                    format_args!("must be positive and finite, got {s}"),
                                );
                            }
                            let c = *b.intercept.get_or_insert(0.0);
                            if !fin(c) {
                                return err(&format!("{path}.intercept"), "must be finite");
                            }
                        }
                        "power_terms" => {
                            if b.slope.is_some() || b.intercept.is_some() {
                                return err(&path, "power branches take terms and offset only");
                            }
                            let terms = match &b.terms {
                                Some(t) if !t.is_empty() => t,
                                _ => {
                                    return err(
                                        &format!("{path}.terms"),
                                        "at least one (coefficient, exponent) pair is required",
                                    )
                                }
                            };
                            for (j, &(c, p)) in terms.iter().enumerate() {
                                if !(c > 0.0) || !fin(c) || !(p > 0.0) || !fin(p) {
                                    return err(
                                        &format!("{path}.terms[{j}]"),
                                        format_args!(
                                            "coefficient and exponent must be positive and finite, \
                                             got ({c}, {p})"
                                        ),
                                    );
                                }
                            }
                            let o = *b.offset.get_or_insert(0.0);
                            if !fin(o) {
                                return err(&format!("{path}.offset"), "must be finite");
                            }
                        }
                        other => {
                            return err(
                                &format!("{path}.kind"),
                                format_args!("unknown branch kind \"{other}\" (expected affine or power_terms)"),
                            )
                        }
                    }
                }
            }
            "tabulated" => {
                forbid(u.scale.is_some(), "utility.scale")?;
                forbid(u.exponent.is_some(), "utility.exponent")?;
                forbid(u.terms.is_some(), "utility.terms")?;
                forbid(u.branches.is_some(), "utility.branches")?;
                let xs = match &u.xs {
                    Some(v) if v.len() >= 2 => v,
                    _ => return err("utility.xs", "at least two nodes are required"),
                };
                match &u.ys {
                    Some(v) if v.len() == xs.len() => {}
                    Some(v) => {
                        return err(
                            "utility.ys",
                            format_args!("expected {} values to match xs, got {}", xs.len(), v.len()),
                        )
                    }
                    None => return err("utility.ys", "required for family \"tabulated\""),
                }
                let q = match u.tail_exponent {
                    Some(q) => q,
                    None => return err("utility.tail_exponent", "required for family \"tabulated\""),
                };
                if !(q > 0.0 && q < 1.0) {
                    return err("utility.tail_exponent", format_args!("p must lie in (0,1), got {q}"));
                }
            }
            other => {
                return err(
                    "utility.family",
                    format_args!(
                        "unknown family \"{other}\" (expected power, power_sum, kinked_min_sqrt, \
                         min_of_pieces, or tabulated)"
                    ),
                )
            }
        }
        Ok(())
    }

    fn validate_simulation(&self) -> Result<()> {
        let s = &self.simulation;
        SimConfig {
            paths: s.paths,
            steps_per_year: s.steps_per_year,
            seed: self.seed,
            antithetic: s.antithetic,
        }
        .validated()
        .map_err(|e| ConfigError(format!("simulation: {e}")))?;
        if !(s.x0 > 0.0) || !fin(s.x0) {
            return err("simulation.x0", format_args!("must be positive and finite, got {}", s.x0));
        }
        if s.table_nodes < 2 {
            return err("simulation.table_nodes", "need at least 2 wealth nodes");
        }
        Ok(())
    }

    fn validate_application(&self) -> Result<()> {
        let horizon = self.horizon();
        if let Some(cv) = &self.application.cvar {
            if !(cv.beta > 0.0 && cv.beta < 1.0) {
                return err("application.cvar.beta", format_args!("must lie in (0,1), got {}", cv.beta));
            }
            if cv.lambdas.is_empty() {
                return err("application.cvar.lambdas", "at least one weight is required");
            }
            for (i, &l) in cv.lambdas.iter().enumerate() {
                if !(l >= 0.0) || !fin(l) {
                    return err(
                        &format!("application.cvar.lambdas[{i}]"),
                        format_args!("must be nonnegative and finite, got {l}"),
                    );
                }
            }
            if !(cv.y_tol > 0.0) || !fin(cv.y_tol) {
                return err("application.cvar.y_tol", format_args!("must be positive, got {}", cv.y_tol));
            }
        }
        if let Some(r) = &self.application.risk {
            check_times(r.times.as_deref(), horizon, "application.risk.times")?;
            check_positive_grid(r.wealth.as_deref(), "application.risk.wealth")?;
            check_positive_grid(r.dual.as_deref(), "application.risk.dual")?;
        }
        if let Some(s) = &self.application.surface {
            check_times(s.times.as_deref(), horizon, "application.surface.times")?;
            check_positive_grid(s.states.as_deref(), "application.surface.states")?;
        }
        Ok(())
    }

    /// Terminal time `T` (normalized configurations always carry a grid).
    pub fn horizon(&self) -> f64 {
        *self
            .market
            .grid
            .as_ref()
            .expect("normalized configuration carries a grid")
            .last()
            .expect("grid has at least two knots")
    }

    // -- conversions into domain types ------------------------------------

    pub fn build_market(&self) -> Result<MarketParams> {
        let grid = self.market.grid.clone().expect("normalized");
        let n = self.market.drift[0].len();
        let b: Vec<DVector<f64>> =
            self.market.drift.iter().map(|d| DVector::from_vec(d.clone())).collect();
        let sigma: Vec<DMatrix<f64>> = self
            .market
            .volatility
            .iter()
            .map(|rows| {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                DMatrix::from_row_slice(n, n, &flat)
            })
            .collect();
        let cone = match self.market.cone.kind.as_str() {
            "whole_space" => ConeSpec::WholeSpace,
            "nonneg_orthant" => ConeSpec::NonnegOrthant,
            "finitely_generated" => ConeSpec::FinitelyGenerated {
                generators: to_vectors(self.market.cone.generators.as_ref().expect("validated")),
            },
            "half_spaces" => ConeSpec::HalfSpaces {
                normals: to_vectors(self.market.cone.normals.as_ref().expect("validated")),
            },
            _ => unreachable!("cone kind validated"),
        };
        MarketParams::new(grid, b, sigma, cone, self.market.theta_floor)
            .map_err(|e| ConfigError(format!("market: {e}")))
    }

    pub fn build_utility(&self) -> Result<UtilityFunction> {
        let u = &self.utility;
        let built = match u.family.as_str() {
            "power" => UtilityFunction::power(u.scale.expect("normalized"), u.exponent.expect("validated")),
            "power_sum" => UtilityFunction::power_sum(u.terms.clone().expect("validated")),
            "kinked_min_sqrt" => Ok(kinked_min_sqrt()),
            "min_of_pieces" => {
                let branches = u
                    .branches
                    .as_ref()
                    .expect("validated")
                    .iter()
                    .map(|b| match b.kind.as_str() {
                        "affine" => ConcaveBranch::Affine {
                            slope: b.slope.expect("validated"),
                            intercept: b.intercept.expect("normalized"),
                        },
                        "power_terms" => ConcaveBranch::PowerTerms {
                            terms: b.terms.clone().expect("validated"),
                            offset: b.offset.expect("normalized"),
                        },
                        _ => unreachable!("branch kind validated"),
                    })
                    .collect();
                UtilityFunction::min_of_pieces(branches)
            }
            "tabulated" => UtilityFunction::tabulated(
                u.xs.clone().expect("validated"),
                u.ys.clone().expect("validated"),
                u.tail_exponent.expect("validated"),
            ),
            _ => unreachable!("family validated"),
        }
        .map_err(|e| ConfigError(format!("utility: {e}")))?;
        let report = built.validate(&ValidationConfig::default());
        if !report.passed() {
            let detail: Vec<String> =
                report.failures().iter().map(|f| format!("{} ({})", f.name, f.detail)).collect();
            return err("utility", format_args!("failed admissibility: {}", detail.join("; ")));
        }
        Ok(built)
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        QuadratureConfig { half_width: self.quadrature.half_width, nodes: self.quadrature.nodes }
            .validated()
            .expect("checked during config validation")
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            paths: s.paths,
            steps_per_year: s.steps_per_year,
            seed: self.seed,
            antithetic: s.antithetic,
        }
        .validated()
        .expect("checked during config validation")
    }
}

fn check_rays(rays: &[Vec<f64>], n: usize, path: &str) -> Result<()> {
    for (i, g) in rays.iter().enumerate() {
        if g.len() != n {
            return err(&format!("{path}[{i}]"), format_args!("expected length {n}, got {}", g.len()));
        }
        if !g.iter().all(|v| fin(*v)) {
            return err(&format!("{path}[{i}]"), "entries must be finite");
        }
        if g.iter().all(|v| *v == 0.0) {
            return err(&format!("{path}[{i}]"), "must be nonzero");
        }
    }
    Ok(())
}

fn check_times(times: Option<&[f64]>, horizon: f64, path: &str) -> Result<()> {
    if let Some(ts) = times {
        if ts.is_empty() {
            return err(path, "must be nonempty when given");
        }
        for (i, &t) in ts.iter().enumerate() {
            if !(t >= 0.0 && t < horizon) || !fin(t) {
                return err(
                    &format!("{path}[{i}]"),
                    format_args!("must lie in [0, T) with T = {horizon}, got {t}"),
                );
            }
        }
    }
    Ok(())
}

fn check_positive_grid(grid: Option<&[f64]>, path: &str) -> Result<()> {
    if let Some(g) = grid {
        if g.is_empty() {
            return err(path, "must be nonempty when given");
        }
        for (i, &v) in g.iter().enumerate() {
            if !(v > 0.0) || !fin(v) {
                return err(&format!("{path}[{i}]"), format_args!("must be positive and finite, got {v}"));
            }
        }
        if !g.windows(2).all(|w| w[1] > w[0]) {
            return err(path, "must be strictly increasing");
        }
    }
    Ok(())
}

fn to_vectors(rows: &[Vec<f64>]) -> Vec<DVector<f64>> {
    rows.iter().map(|r| DVector::from_vec(r.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merton_json() -> String {
        r#"{
            "market": {"horizon": 1.0, "drift": [[0.2]], "volatility": [[[0.4]]]},
            "utility": {"family": "power", "exponent": 0.5}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let cfg = parse_config(&merton_json()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.simulation.paths, 100_000);
        assert_eq!(cfg.quadrature.nodes, 4001);
        assert_eq!(cfg.output.dir, "out");
        assert_eq!(cfg.market.grid.as_deref(), Some(&[0.0, 1.0][..]));
        assert!(cfg.market.horizon.is_none(), "horizon folds into the grid");
        assert_eq!(cfg.utility.scale, Some(1.0), "default power scale echoed");
        assert_eq!(cfg.horizon(), 1.0);
        cfg.build_market().unwrap().effective().unwrap();
        cfg.build_utility().unwrap();
    }

    #[test]
    fn echo_is_canonical_and_reparses() {
        let cfg = parse_config(&merton_json()).unwrap();
        let echo = serde_json::to_string_pretty(&cfg).unwrap();
        let again = parse_config(&echo).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn out_of_range_exponent_is_rejected_with_path() {
        let text = merton_json().replace("0.5", "1.2");
        let e = parse_config(&text).unwrap_err().to_string();
        assert!(e.contains("utility.exponent"), "{e}");
        assert!(e.contains("p must lie in (0,1)"), "{e}");
    }

    #[test]
    fn negative_theta_floor_is_rejected_with_path() {
        let text = r#"{
            "market": {"horizon": 1.0, "drift": [[0.2]], "volatility": [[[0.4]]], "theta_floor": -1.0},
            "utility": {"family": "power", "exponent": 0.5}
        }"#;
        let e = parse_config(text).unwrap_err().to_string();
        assert!(e.contains("market.theta_floor"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = r#"{
            "market": {"horizon": 1.0, "drift": [[0.2]], "volatility": [[[0.4]]]},
            "utility": {"family": "power", "exponent": 0.5},
            "extra": 1
        }"#;
        let e = parse_config(text).unwrap_err().to_string();
        assert!(e.contains("unknown field"), "{e}");
        assert!(e.contains("line"), "{e}");
    }

    #[test]
    fn misplaced_family_fields_are_rejected() {
        let text = r#"{
            "market": {"horizon": 1.0, "drift": [[0.2]], "volatility": [[[0.4]]]},
            "utility": {"family": "kinked_min_sqrt", "exponent": 0.5}
        }"#;
        let e = parse_config(text).unwrap_err().to_string();
        assert!(e.contains("utility.exponent"), "{e}");
        assert!(e.contains("not used"), "{e}");
    }

    #[test]
    fn singular_volatility_fails_when_building_the_effective_market() {
        let text = r#"{
            "market": {"horizon": 1.0, "drift": [[0.1, 0.1]],
                       "volatility": [[[0.4, 0.4], [0.4, 0.4]]]},
            "utility": {"family": "power", "exponent": 0.5}
        }"#;
        let cfg = parse_config(text).unwrap();
        let e = cfg.build_market().unwrap().effective().unwrap_err().to_string();
        assert!(e.contains("singular") || e.contains("invert"), "{e}");
    }

    #[test]
    fn kinked_and_piecewise_families_build() {
        let text = r#"{
            "market": {"horizon": 1.0, "drift": [[0.2]], "volatility": [[[0.4]]]},
            "utility": {"family": "min_of_pieces", "branches": [
                {"kind": "affine", "slope": 1.0},
                {"kind": "power_terms", "terms": [[1.0, 0.5]]}
            ]}
        }"#;
        let cfg = parse_config(text).unwrap();
        let u = cfg.build_utility().unwrap();
        assert_eq!(u.crossovers(), &[1.0]);
    }

    #[test]
    fn cvar_block_bounds_are_checked() {
        let text = r#"{
            "market": {"horizon": 1.0, "drift": [[0.2]], "volatility": [[[0.4]]]},
            "utility": {"family": "power", "exponent": 0.5},
            "application": {"cvar": {"beta": 1.5, "lambdas": [0.0]}}
        }"#;
        let e = parse_config(text).unwrap_err().to_string();
        assert!(e.contains("application.cvar.beta"), "{e}");
    }
}
