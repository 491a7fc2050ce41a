//! Utility families on `[0, ∞)` and their admissibility validation.
//!
//! The solver accepts any terminal reward in the class
//!
//! ```text
//! U continuous, nondecreasing, concave on [0, ∞),
//! U(0) = 0,  U(x) → ∞,  0 ≤ U(x) ≤ L (1 + x^p)  with  L > 0, 0 < p < 1,
//! ```
//!
//! which deliberately includes kinked and locally-flat-marginal rewards.
//! Differentiability is never assumed: first-order information is exposed as
//! the superdifferential interval `[U'(x+), U'(x−)]`.
//!
//! Families:
//! - [`UtilityFamily::Power`]: `s·x^p` (closed-form conjugate),
//! - [`UtilityFamily::PowerSum`]: `Σ cᵢ x^{pᵢ}` (smooth, numeric conjugate),
//! - [`UtilityFamily::MinOfConcavePieces`]: pointwise minimum of affine and
//!   power-sum branches, with crossover points located and validated at
//!   construction — this is the home of kinked rewards like `min(x, √x)` and
//!   of the CVaR-reshaped rewards built by [`crate::apps`],
//! - [`UtilityFamily::Tabulated`]: concave piecewise-linear interpolant of
//!   sample points with a slope-matched power tail.
//!
//! Construction performs structural validation (ordering, crossovers) and
//! derives a growth certificate; [`UtilityFunction::validate`] then audits the
//! full admissibility class on a log grid and is a hard precondition for
//! taking conjugates.

mod conjugate;

pub use conjugate::{dual_growth_coef, power_matching_dual, DualGrowthBound, DualPiece, DualUtility};

use crate::diagnostics::{CheckReport, CheckResult};
use crate::numerics::{bisect, logspace};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("invalid utility parameters: {0}")]
    InvalidParameters(String),
    #[error("branch crossover structure invalid: {0}")]
    CrossoverStructure(String),
    #[error("utility fails admissibility validation: {0}")]
    NotAdmissible(String),
    #[error("conjugate solver failed: {0}")]
    ConjugateSolver(String),
    #[error("operation unsupported for this family: {0}")]
    Unsupported(String),
}

/// Certificate `U(x) ≤ coef · (1 + x^exponent)` with `exponent ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthBound {
    pub coef: f64,
    pub exponent: f64,
}

/// Superdifferential of a concave function at a point: `[U'(x+), U'(x−)]`.
///
/// At smooth points `lower == upper`; at a kink the interval is proper. At
/// `x = 0` the upper end is `+∞` whenever the slope blows up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradientInterval {
    pub lower: f64,
    pub upper: f64,
}

impl SubgradientInterval {
    pub fn point(slope: f64) -> Self {
        SubgradientInterval { lower: slope, upper: slope }
    }

    pub fn contains(&self, y: f64, tol: f64) -> bool {
        y >= self.lower - tol && y <= self.upper + tol
    }
}

/// A concave branch used by [`UtilityFamily::MinOfConcavePieces`].
#[derive(Debug, Clone, PartialEq)]
pub enum ConcaveBranch {
    /// `slope·x + intercept`.
    Affine { slope: f64, intercept: f64 },
    /// `Σ cᵢ x^{pᵢ} + offset`, all `cᵢ > 0`, `pᵢ > 0`.
    ///
    /// Exponents outside `(0, 1)` are structurally permitted so that the
    /// admissibility validator (not the constructor) is the arbiter of
    /// concavity and growth.
    PowerTerms { terms: Vec<(f64, f64)>, offset: f64 },
}

impl ConcaveBranch {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ConcaveBranch::Affine { slope, intercept } => slope * x + intercept,
            ConcaveBranch::PowerTerms { terms, offset } => {
                offset + terms.iter().map(|&(c, p)| c * x.powf(p)) .sum::<f64>()
            }
        }
    }

    /// One-sided slope; for these branch kinds left and right slopes agree on
    /// `(0, ∞)`. At `x = 0` power terms with exponent `< 1` give `+∞`.
    pub fn slope(&self, x: f64) -> f64 {
        match self {
            ConcaveBranch::Affine { slope, .. } => *slope,
            ConcaveBranch::PowerTerms { terms, .. } => {
                if x == 0.0 && terms.iter().any(|&(c, p)| c > 0.0 && p < 1.0) {
                    return f64::INFINITY;
                }
                terms.iter().map(|&(c, p)| c * p * x.powf(p - 1.0)).sum::<f64>()
            }
        }
    }

    /// Second derivative on `(0, ∞)` (affine: 0).
    fn curvature(&self, x: f64) -> f64 {
        match self {
            ConcaveBranch::Affine { .. } => 0.0,
            ConcaveBranch::PowerTerms { terms, .. } => {
                terms.iter().map(|&(c, p)| c * p * (p - 1.0) * x.powf(p - 2.0)).sum::<f64>()
            }
        }
    }

    pub(crate) fn scaled(&self, k: f64) -> ConcaveBranch {
        match self {
            ConcaveBranch::Affine { slope, intercept } => {
                ConcaveBranch::Affine { slope: k * slope, intercept: k * intercept }
            }
            ConcaveBranch::PowerTerms { terms, offset } => ConcaveBranch::PowerTerms {
                terms: terms.iter().map(|&(c, p)| (k * c, p)).collect(),
                offset: k * offset,
            },
        }
    }

    pub(crate) fn shifted(&self, d: f64) -> ConcaveBranch {
        match self {
            ConcaveBranch::Affine { slope, intercept } => {
                ConcaveBranch::Affine { slope: *slope, intercept: intercept + d }
            }
            ConcaveBranch::PowerTerms { terms, offset } => {
                ConcaveBranch::PowerTerms { terms: terms.clone(), offset: offset + d }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtilityFamily {
    /// `scale · x^exponent`, `scale > 0`, `exponent ∈ (0, 1)`.
    Power { scale: f64, exponent: f64 },
    /// `Σ cᵢ x^{pᵢ}`, all `cᵢ > 0`, `pᵢ ∈ (0, 1)`.
    PowerSum { terms: Vec<(f64, f64)> },
    /// Pointwise minimum of concave branches, listed in activity order
    /// (branch 0 active nearest 0). Crossovers are derived and validated.
    MinOfConcavePieces { branches: Vec<ConcaveBranch> },
    /// Concave piecewise-linear interpolant through `(xs[i], ys[i])` with a
    /// power tail `ys[n-1] + κ (x^q - xs[n-1]^q)` matching the last slope.
    Tabulated { xs: Vec<f64>, ys: Vec<f64>, tail_exponent: f64 },
}

/// A validated utility function: family plus derived structure.
#[derive(Debug, Clone)]
pub struct UtilityFunction {
    family: UtilityFamily,
    /// `None` when the tail provably escapes every sublinear power bound
    /// (e.g. an affine tail branch); such functions fail validation.
    growth: Option<GrowthBound>,
    /// For `MinOfConcavePieces`: strictly increasing branch switch points.
    crossovers: Vec<f64>,
    /// For `Tabulated`: tail coefficient κ matched to the last slope.
    tail_coef: f64,
}

/// Relative tolerance used when deciding that a query point sits exactly on a
/// kink (crossover or tabulated node).
const KINK_SNAP_REL: f64 = 1e-12;

impl UtilityFunction {
    // ------------------------------------------------------------------
    // constructors
    // ------------------------------------------------------------------

    /// `scale · x^exponent`.
    pub fn power(scale: f64, exponent: f64) -> Result<Self, UtilityError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(UtilityError::InvalidParameters(format!(
                "power scale must be positive and finite, got {scale}"
            )));
        }
        if !(exponent > 0.0 && exponent < 1.0) {
            return Err(UtilityError::InvalidParameters(format!(
                "power exponent must lie strictly in (0, 1), got {exponent}"
            )));
        }
        Ok(UtilityFunction {
            family: UtilityFamily::Power { scale, exponent },
            growth: Some(GrowthBound { coef: scale, exponent }),
            crossovers: Vec::new(),
            tail_coef: 0.0,
        })
    }

    /// `Σ cᵢ x^{pᵢ}` with every `cᵢ > 0` and `pᵢ ∈ (0, 1)`.
    pub fn power_sum(terms: Vec<(f64, f64)>) -> Result<Self, UtilityError> {
        if terms.is_empty() {
            return Err(UtilityError::InvalidParameters("power_sum needs at least one term".into()));
        }
        for &(c, p) in &terms {
            if !(c > 0.0) || !c.is_finite() || !(p > 0.0 && p < 1.0) {
                return Err(UtilityError::InvalidParameters(format!(
                    "power_sum term (coef={c}, exponent={p}) must have coef > 0 and exponent in (0, 1)"
                )));
            }
        }
        let coef: f64 = terms.iter().map(|&(c, _)| c).sum();
        let exponent = terms.iter().map(|&(_, p)| p).fold(0.0_f64, f64::max);
        Ok(UtilityFunction {
            family: UtilityFamily::PowerSum { terms },
            growth: Some(GrowthBound { coef, exponent }),
            crossovers: Vec::new(),
            tail_coef: 0.0,
        })
    }

    /// Pointwise minimum of concave branches in activity order.
    ///
    /// Consecutive branches must cross exactly once on `(0, ∞)` with strictly
    /// increasing crossover points, and the branch listed first must be the
    /// minimum before its crossover. A sampled audit confirms that the global
    /// minimum agrees with the activity order everywhere.
    pub fn min_of_pieces(branches: Vec<ConcaveBranch>) -> Result<Self, UtilityError> {
        if branches.is_empty() {
            return Err(UtilityError::InvalidParameters("min_of_pieces needs at least one branch".into()));
        }
        for b in &branches {
            if let ConcaveBranch::PowerTerms { terms, .. } = b {
                for &(c, p) in terms {
                    if !(c > 0.0) || !c.is_finite() || !(p > 0.0) || !p.is_finite() {
                        return Err(UtilityError::InvalidParameters(format!(
                            "power term (coef={c}, exponent={p}) must have coef > 0 and exponent > 0"
                        )));
                    }
                }
            }
        }
        let crossovers = derive_crossovers(&branches)?;
        let growth = derive_min_pieces_growth(&branches, &crossovers);
        Ok(UtilityFunction {
            family: UtilityFamily::MinOfConcavePieces { branches },
            growth,
            crossovers,
            tail_coef: 0.0,
        })
    }

    /// [`min_of_pieces`](Self::min_of_pieces) with analytically known
    /// crossovers, validated locally instead of rediscovered by a global
    /// scan. Needed when a construction produces switch points far outside
    /// the scan window (they can sit at any positive scale).
    pub(crate) fn min_of_pieces_given(
        branches: Vec<ConcaveBranch>,
        crossovers: Vec<f64>,
    ) -> Result<Self, UtilityError> {
        if branches.is_empty() || crossovers.len() + 1 != branches.len() {
            return Err(UtilityError::InvalidParameters(format!(
                "{} branches need exactly {} crossovers, got {}",
                branches.len(),
                branches.len().saturating_sub(1),
                crossovers.len()
            )));
        }
        for b in &branches {
            if let ConcaveBranch::PowerTerms { terms, .. } = b {
                for &(c, p) in terms {
                    if !(c > 0.0) || !c.is_finite() || !(p > 0.0) || !p.is_finite() {
                        return Err(UtilityError::InvalidParameters(format!(
                            "power term (coef={c}, exponent={p}) must have coef > 0 and exponent > 0"
                        )));
                    }
                }
            }
        }
        for pair in crossovers.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(UtilityError::CrossoverStructure(format!(
                    "crossovers out of order: {:.6e} after {:.6e}",
                    pair[1], pair[0]
                )));
            }
        }
        for (j, &c) in crossovers.iter().enumerate() {
            if !(c > 0.0) || !c.is_finite() {
                return Err(UtilityError::CrossoverStructure(format!(
                    "crossover {j} must be positive and finite, got {c}"
                )));
            }
            // Transversality: branch j is strictly below branch j+1 just
            // left of c and strictly above just right of it.
            let d = |x: f64| branches[j].eval(x) - branches[j + 1].eval(x);
            let h = 1e-6 * c;
            let slack = 1e-12 * (1.0 + branches[j].eval(c).abs());
            if !(d(c - h) <= slack) || !(d(c + h) >= -slack) {
                return Err(UtilityError::CrossoverStructure(format!(
                    "branches {j} and {} do not switch at the stated \
                     crossover {c:.6e}",
                    j + 1
                )));
            }
        }
        // Sampled audit as in the derived path, with extra samples around
        // each stated crossover so tiny scales are exercised too.
        let mut audit = logspace(1e-10, 1e10, 321);
        for &c in &crossovers {
            audit.push(0.5 * c);
            audit.push(2.0 * c);
        }
        for &x in &audit {
            let idx = crossovers.partition_point(|&c| c < x);
            let active = branches[idx].eval(x);
            let global = branches.iter().map(|b| b.eval(x)).fold(f64::INFINITY, f64::min);
            if active - global > 1e-9 * (1.0 + global.abs()) {
                return Err(UtilityError::CrossoverStructure(format!(
                    "branch {idx} is not the minimum at x = {x:.3e} \
                     (active {active:.6e} vs min {global:.6e})"
                )));
            }
        }
        let growth = derive_min_pieces_growth(&branches, &crossovers);
        Ok(UtilityFunction {
            family: UtilityFamily::MinOfConcavePieces { branches },
            growth,
            crossovers,
            tail_coef: 0.0,
        })
    }

    /// Concave piecewise-linear interpolant with a slope-matched power tail.
    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>, tail_exponent: f64) -> Result<Self, UtilityError> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(UtilityError::InvalidParameters(
                "tabulated needs matching xs/ys with at least two points".into(),
            ));
        }
        if xs[0] != 0.0 || ys[0] != 0.0 {
            return Err(UtilityError::InvalidParameters(
                "tabulated data must start at (0, 0)".into(),
            ));
        }
        if !(tail_exponent > 0.0 && tail_exponent < 1.0) {
            return Err(UtilityError::InvalidParameters(format!(
                "tail exponent must lie in (0, 1), got {tail_exponent}"
            )));
        }
        let mut prev_slope = f64::INFINITY;
        for i in 1..xs.len() {
            if !(xs[i] > xs[i - 1]) {
                return Err(UtilityError::InvalidParameters("xs must be strictly increasing".into()));
            }
            if !(ys[i] > ys[i - 1]) {
                return Err(UtilityError::InvalidParameters("ys must be strictly increasing".into()));
            }
            let s = (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
            if s > prev_slope * (1.0 + 1e-12) {
                return Err(UtilityError::InvalidParameters(format!(
                    "tabulated points are not concave near x = {}",
                    xs[i]
                )));
            }
            prev_slope = s;
        }
        let n = xs.len();
        let last_slope = (ys[n - 1] - ys[n - 2]) / (xs[n - 1] - xs[n - 2]);
        let xn = xs[n - 1];
        // Tail y(x) = ys[n-1] + κ (x^q − xn^q) with κ chosen so y'(xn) equals
        // the last panel slope: κ q xn^{q-1} = last_slope.
        let q = tail_exponent;
        let tail_coef = last_slope / (q * xn.powf(q - 1.0));
        // U(x) ≤ ys_max + κ x^q on the tail, and the interpolant is below that
        // same bound on [0, xn] by concavity; fold into coef·(1 + x^q).
        let coef = ys[n - 1].max(tail_coef) + ys[n - 1];
        Ok(UtilityFunction {
            family: UtilityFamily::Tabulated { xs, ys, tail_exponent },
            growth: Some(GrowthBound { coef, exponent: tail_exponent }),
            crossovers: Vec::new(),
            tail_coef,
        })
    }

    // ------------------------------------------------------------------
    // accessors
    // ------------------------------------------------------------------

    pub fn family(&self) -> &UtilityFamily {
        &self.family
    }

    /// Growth certificate, when the family admits one.
    pub fn growth(&self) -> Option<GrowthBound> {
        self.growth
    }

    /// Branch switch points for `MinOfConcavePieces` (empty otherwise).
    pub fn crossovers(&self) -> &[f64] {
        &self.crossovers
    }

    /// The function as an ordered list of concave branches (branch `i`
    /// active on the interval between crossovers `i−1` and `i`), or `None`
    /// for families without a closed-form branch structure (tabulated).
    pub(crate) fn branch_decomposition(&self) -> Option<Vec<ConcaveBranch>> {
        match &self.family {
            UtilityFamily::Power { scale, exponent } => Some(vec![ConcaveBranch::PowerTerms {
                terms: vec![(*scale, *exponent)],
                offset: 0.0,
            }]),
            UtilityFamily::PowerSum { terms } => Some(vec![ConcaveBranch::PowerTerms {
                terms: terms.clone(),
                offset: 0.0,
            }]),
            UtilityFamily::MinOfConcavePieces { branches } => Some(branches.clone()),
            UtilityFamily::Tabulated { .. } => None,
        }
    }

    // ------------------------------------------------------------------
    // evaluation
    // ------------------------------------------------------------------

    /// `U(x)`, `x ≥ 0`.
    pub fn eval(&self, x: f64) -> f64 {
        assert!(x >= 0.0 && x.is_finite(), "utility argument must be finite and >= 0, got {x}");
        match &self.family {
            UtilityFamily::Power { scale, exponent } => scale * x.powf(*exponent),
            UtilityFamily::PowerSum { terms } => {
                terms.iter().map(|&(c, p)| c * x.powf(p)).sum()
            }
            UtilityFamily::MinOfConcavePieces { branches } => {
                branches.iter().map(|b| b.eval(x)).fold(f64::INFINITY, f64::min)
            }
            UtilityFamily::Tabulated { xs, ys, tail_exponent } => {
                let n = xs.len();
                if x >= xs[n - 1] {
                    return ys[n - 1] + self.tail_coef * (x.powf(*tail_exponent) - xs[n - 1].powf(*tail_exponent));
                }
                let i = xs.partition_point(|&v| v <= x).max(1);
                let (x0, x1) = (xs[i - 1], xs[i]);
                let (y0, y1) = (ys[i - 1], ys[i]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    /// Superdifferential `[U'(x+), U'(x−)]` at `x ≥ 0`.
    pub fn subgradient(&self, x: f64) -> SubgradientInterval {
        assert!(x >= 0.0 && x.is_finite(), "utility argument must be finite and >= 0, got {x}");
        match &self.family {
            UtilityFamily::Power { scale, exponent } => {
                if x == 0.0 {
                    return SubgradientInterval { lower: f64::INFINITY, upper: f64::INFINITY };
                }
                SubgradientInterval::point(scale * exponent * x.powf(exponent - 1.0))
            }
            UtilityFamily::PowerSum { terms } => {
                if x == 0.0 {
                    return SubgradientInterval { lower: f64::INFINITY, upper: f64::INFINITY };
                }
                SubgradientInterval::point(terms.iter().map(|&(c, p)| c * p * x.powf(p - 1.0)).sum())
            }
            UtilityFamily::MinOfConcavePieces { branches } => {
                // Relative-only snap: crossovers are strictly positive and
                // may sit at tiny scales, where an absolute floor would
                // swallow every nearby point.
                let snap = |c: f64| (x - c).abs() <= KINK_SNAP_REL * c.abs();
                if let Some(j) = self.crossovers.iter().position(|&c| snap(c)) {
                    let c = self.crossovers[j];
                    return SubgradientInterval {
                        lower: branches[j + 1].slope(c),
                        upper: branches[j].slope(c),
                    };
                }
                let idx = self.crossovers.partition_point(|&c| c < x);
                let s = branches[idx].slope(x);
                if x == 0.0 && s.is_infinite() {
                    return SubgradientInterval { lower: f64::INFINITY, upper: f64::INFINITY };
                }
                SubgradientInterval::point(s)
            }
            UtilityFamily::Tabulated { xs, ys, tail_exponent } => {
                let n = xs.len();
                let seg_slope = |i: usize| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
                let tail_slope =
                    |x: f64| self.tail_coef * tail_exponent * x.powf(tail_exponent - 1.0);
                if x >= xs[n - 1] {
                    // Slope-matched: smooth across the junction.
                    return SubgradientInterval::point(tail_slope(x.max(xs[n - 1])));
                }
                let snap = |c: f64| (x - c).abs() <= KINK_SNAP_REL * c.abs();
                for i in 1..n - 1 {
                    if snap(xs[i]) {
                        return SubgradientInterval { lower: seg_slope(i), upper: seg_slope(i - 1) };
                    }
                }
                let i = xs.partition_point(|&v| v <= x).max(1) - 1;
                SubgradientInterval::point(seg_slope(i.min(n - 2)))
            }
        }
    }

    /// `U'(0+)`; `+∞` for families with a vertical tangent at the origin.
    pub fn initial_slope(&self) -> f64 {
        self.subgradient(0.0).lower
    }

    /// Whether `U(x) → ∞` as `x → ∞` (based on the tail branch structure).
    pub fn tail_unbounded(&self) -> bool {
        match &self.family {
            UtilityFamily::Power { .. } | UtilityFamily::PowerSum { .. } => true,
            UtilityFamily::MinOfConcavePieces { branches } => match branches.last().unwrap() {
                ConcaveBranch::Affine { slope, .. } => *slope > 0.0,
                ConcaveBranch::PowerTerms { terms, .. } => terms.iter().any(|&(c, _)| c > 0.0),
            },
            UtilityFamily::Tabulated { .. } => self.tail_coef > 0.0,
        }
    }

    /// Kink locations (points with a proper superdifferential interval).
    pub fn kinks(&self) -> Vec<f64> {
        match &self.family {
            UtilityFamily::Power { .. } | UtilityFamily::PowerSum { .. } => Vec::new(),
            UtilityFamily::MinOfConcavePieces { branches } => {
                let mut ks = Vec::new();
                for (j, &c) in self.crossovers.iter().enumerate() {
                    if branches[j].slope(c) > branches[j + 1].slope(c) + KINK_SNAP_REL {
                        ks.push(c);
                    }
                }
                ks
            }
            UtilityFamily::Tabulated { xs, .. } => xs[1..xs.len() - 1].to_vec(),
        }
    }

    /// Whether `U` is twice continuously differentiable at `x > 0`.
    pub fn is_smooth_at(&self, x: f64) -> bool {
        let sub = self.subgradient(x);
        if sub.upper - sub.lower > KINK_SNAP_REL * (1.0 + sub.lower.abs()) {
            return false;
        }
        match &self.family {
            UtilityFamily::Power { .. } | UtilityFamily::PowerSum { .. } => true,
            // Piecewise-linear interior: C² except at the nodes and the tail
            // junction where curvature jumps.
            UtilityFamily::Tabulated { xs, .. } => {
                let snap = |c: f64| (x - c).abs() <= KINK_SNAP_REL * c.abs();
                !xs.iter().any(|&c| snap(c))
            }
            UtilityFamily::MinOfConcavePieces { .. } => {
                let snap = |c: f64| (x - c).abs() <= KINK_SNAP_REL * c.abs();
                !self.crossovers.iter().any(|&c| snap(c))
            }
        }
    }

    /// `U''(x)` where the family is C² (see [`Self::is_smooth_at`]).
    pub fn curvature(&self, x: f64) -> Result<f64, UtilityError> {
        if x <= 0.0 {
            return Err(UtilityError::Unsupported("curvature requires x > 0".into()));
        }
        if !self.is_smooth_at(x) {
            return Err(UtilityError::Unsupported(format!(
                "utility is not twice differentiable at x = {x}"
            )));
        }
        match &self.family {
            UtilityFamily::Power { scale, exponent } => {
                Ok(scale * exponent * (exponent - 1.0) * x.powf(exponent - 2.0))
            }
            UtilityFamily::PowerSum { terms } => {
                Ok(terms.iter().map(|&(c, p)| c * p * (p - 1.0) * x.powf(p - 2.0)).sum())
            }
            UtilityFamily::MinOfConcavePieces { branches } => {
                let idx = self.crossovers.partition_point(|&c| c < x);
                Ok(branches[idx].curvature(x))
            }
            UtilityFamily::Tabulated { xs, tail_exponent, .. } => {
                let n = xs.len();
                if x > xs[n - 1] {
                    Ok(self.tail_coef * tail_exponent * (tail_exponent - 1.0) * x.powf(tail_exponent - 2.0))
                } else {
                    Ok(0.0)
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // validation
    // ------------------------------------------------------------------

    /// Audit the admissibility class on a grid.
    ///
    /// Checks: `U(0) = 0`; nonnegativity; nondecreasing and concave sampled
    /// slopes; the growth certificate `U ≤ coef(1 + x^exponent)`; and an
    /// unbounded tail (structural flag plus the value at the grid's right
    /// edge exceeding `min_terminal`).
    pub fn validate(&self, cfg: &ValidationConfig) -> CheckReport {
        let grid = cfg.grid();
        let mut report = CheckReport::new();

        let u0 = self.eval(0.0);
        report.push(CheckResult::from_bool(
            "zero_at_origin",
            u0.abs() <= 1e-12,
            format!("U(0) = {u0:.3e}"),
        ));

        let vals: Vec<f64> = grid.iter().map(|&x| self.eval(x)).collect();

        let neg = grid.iter().zip(&vals).find(|(_, &v)| v < -1e-12);
        report.push(match neg {
            Some((&x, &v)) => CheckResult::fail("nonnegative", format!("U({x:.3e}) = {v:.3e} < 0")),
            None => CheckResult::pass("nonnegative", "U >= 0 on grid"),
        });

        let mut slopes = Vec::with_capacity(grid.len() - 1);
        for i in 1..grid.len() {
            slopes.push((vals[i] - vals[i - 1]) / (grid[i] - grid[i - 1]));
        }
        let dec = grid.windows(2).zip(&slopes).find(|(_, &s)| s < -1e-10);
        report.push(match dec {
            Some((w, &s)) => CheckResult::fail(
                "nondecreasing",
                format!("sampled slope {s:.3e} < 0 on [{:.3e}, {:.3e}]", w[0], w[1]),
            ),
            None => CheckResult::pass("nondecreasing", "sampled slopes >= 0"),
        });

        let mut concave_ok = true;
        let mut concave_detail = String::from("sampled slopes nonincreasing");
        for i in 1..slopes.len() {
            let scale = 1.0 + slopes[i - 1].abs();
            if slopes[i] > slopes[i - 1] + 1e-9 * scale {
                concave_ok = false;
                concave_detail = format!(
                    "sampled slope rises from {:.6e} to {:.6e} near x = {:.3e}",
                    slopes[i - 1],
                    slopes[i],
                    grid[i]
                );
                break;
            }
        }
        report.push(CheckResult::from_bool("concave", concave_ok, concave_detail));

        match self.growth {
            Some(GrowthBound { coef, exponent }) => {
                let viol = grid.iter().zip(&vals).find(|(&x, &v)| {
                    v > coef * (1.0 + x.powf(exponent)) * (1.0 + 1e-9) + 1e-12
                });
                report.push(match viol {
                    Some((&x, &v)) => CheckResult::fail(
                        "power_growth",
                        format!(
                            "U({x:.3e}) = {v:.6e} exceeds {coef:.3}·(1 + x^{exponent:.3})"
                        ),
                    ),
                    None => CheckResult::pass(
                        "power_growth",
                        format!("U <= {coef:.3}·(1 + x^{exponent:.3}) on grid"),
                    ),
                });
            }
            None => {
                report.push(CheckResult::fail(
                    "power_growth",
                    "tail growth admits no sublinear power certificate".to_string(),
                ));
            }
        }

        let tail_val = *vals.last().unwrap();
        let unbounded = self.tail_unbounded() && tail_val > cfg.min_terminal;
        report.push(CheckResult::from_bool(
            "unbounded",
            unbounded,
            format!(
                "U({:.3e}) = {:.3e}, structurally unbounded: {}",
                grid.last().unwrap(),
                tail_val,
                self.tail_unbounded()
            ),
        ));

        report
    }

    /// Legendre conjugate `Ũ(y) = sup_x {U(x) − x y}`.
    ///
    /// Requires [`Self::validate`] to pass with the supplied (or default)
    /// configuration.
    pub fn conjugate(&self) -> Result<DualUtility, UtilityError> {
        let report = self.validate(&ValidationConfig::default());
        report
            .require("conjugate precondition")
            .map_err(UtilityError::NotAdmissible)?;
        DualUtility::build(self)
    }
}

/// Grid and thresholds for [`UtilityFunction::validate`].
#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    /// Minimum value required at the grid's right edge for the unboundedness
    /// check (engineering backstop; structural tail analysis does the real
    /// work).
    pub min_terminal: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { grid_lo: 1e-6, grid_hi: 1e6, grid_points: 512, min_terminal: 1e-3 }
    }
}

impl ValidationConfig {
    fn grid(&self) -> Vec<f64> {
        let mut g = vec![0.0];
        g.extend(logspace(self.grid_lo, self.grid_hi, self.grid_points));
        g
    }
}

// ----------------------------------------------------------------------
// construction helpers
// ----------------------------------------------------------------------

/// Locate and validate crossovers of consecutive branches; audit that the
/// global minimum respects the activity order.
fn derive_crossovers(branches: &[ConcaveBranch]) -> Result<Vec<f64>, UtilityError> {
    let mut crossovers = Vec::with_capacity(branches.len().saturating_sub(1));
    for j in 0..branches.len().saturating_sub(1) {
        let a = &branches[j];
        let b = &branches[j + 1];
        let d = |x: f64| a.eval(x) - b.eval(x);
        // Scan a wide log grid for the sign change (branch j must sit below
        // branch j+1 first, then above).
        let scan = logspace(1e-12, 1e12, 481);
        let mut bracket = None;
        let mut prev = scan[0];
        let mut dprev = d(prev);
        for &x in &scan[1..] {
            let dx = d(x);
            if dprev <= 0.0 && dx > 0.0 {
                bracket = Some((prev, x));
                break;
            }
            if dprev > 0.0 {
                return Err(UtilityError::CrossoverStructure(format!(
                    "branch {j} is above branch {} already at x = {prev:.3e}",
                    j + 1
                )));
            }
            prev = x;
            dprev = dx;
        }
        let (lo, hi) = bracket.ok_or_else(|| {
            UtilityError::CrossoverStructure(format!(
                "branches {j} and {} never cross on (0, 1e12)",
                j + 1
            ))
        })?;
        let c = bisect(d, lo, hi, 1e-15, 400);
        if let Some(&last) = crossovers.last() {
            if c <= last {
                return Err(UtilityError::CrossoverStructure(format!(
                    "crossovers out of order: {c:.6e} after {last:.6e}"
                )));
            }
        }
        crossovers.push(c);
    }

    // Sampled audit: the active branch by crossover bracketing must equal the
    // global minimum (no non-adjacent branch undercuts).
    let audit = logspace(1e-10, 1e10, 321);
    for &x in &audit {
        let idx = crossovers.partition_point(|&c| c < x);
        let active = branches[idx].eval(x);
        let global = branches.iter().map(|b| b.eval(x)).fold(f64::INFINITY, f64::min);
        if active - global > 1e-9 * (1.0 + global.abs()) {
            return Err(UtilityError::CrossoverStructure(format!(
                "branch {idx} is not the minimum at x = {x:.3e} (active {active:.6e} vs min {global:.6e})"
            )));
        }
    }
    Ok(crossovers)
}

/// Growth certificate for a min-of-branches family: the tail branch must be a
/// power branch; the certificate exponent is its largest exponent (if < 1).
fn derive_min_pieces_growth(
    branches: &[ConcaveBranch],
    crossovers: &[f64],
) -> Option<GrowthBound> {
    let tail = branches.last().unwrap();
    let exponent = match tail {
        ConcaveBranch::Affine { slope, .. } => {
            if *slope > 0.0 {
                return None; // affine growth escapes every sublinear power bound
            }
            // Flat or decreasing tail: bounded; certificate exists but the
            // unboundedness check will fail. Use an arbitrary valid exponent.
            0.5
        }
        ConcaveBranch::PowerTerms { terms, .. } => {
            let pmax = terms.iter().map(|&(_, p)| p).fold(0.0_f64, f64::max);
            if pmax >= 1.0 {
                return None;
            }
            pmax
        }
    };
    // U = min ≤ tail branch; bound the tail branch by coef·(1 + x^exponent)
    // beyond the last crossover, and take a scan max before it.
    let mut coef: f64 = match tail {
        ConcaveBranch::Affine { intercept, .. } => tail.eval(0.0).max(*intercept).max(1e-12),
        ConcaveBranch::PowerTerms { terms, offset } => {
            terms.iter().map(|&(c, _)| c).sum::<f64>() + offset.max(0.0)
        }
    };
    let scan_hi = crossovers.last().copied().unwrap_or(1.0).max(1.0) * 10.0;
    for x in logspace(1e-8, scan_hi, 129) {
        let u = branches.iter().map(|b| b.eval(x)).fold(f64::INFINITY, f64::min);
        let denom = 1.0 + x.powf(exponent);
        coef = coef.max(u / denom);
    }
    Some(GrowthBound { coef: coef * (1.0 + 1e-9), exponent })
}

/// Kinked reference reward `min(x, √x)`: slope-1 cap below wealth 1, square
/// root above.
pub fn kinked_min_sqrt() -> UtilityFunction {
    UtilityFunction::min_of_pieces(vec![
        ConcaveBranch::Affine { slope: 1.0, intercept: 0.0 },
        ConcaveBranch::PowerTerms { terms: vec![(1.0, 0.5)], offset: 0.0 },
    ])
    .expect("reference kinked utility is structurally valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn power_eval_and_subgradient() {
        let u = UtilityFunction::power(2.0, 0.5).unwrap();
        assert_relative_eq!(u.eval(4.0), 4.0, max_relative = 1e-15);
        let s = u.subgradient(4.0);
        assert_relative_eq!(s.lower, 0.5, max_relative = 1e-15);
        assert_eq!(s.lower, s.upper);
        assert_eq!(u.initial_slope(), f64::INFINITY);
    }

    #[test]
    fn power_rejects_bad_parameters() {
        assert!(UtilityFunction::power(0.0, 0.5).is_err());
        assert!(UtilityFunction::power(1.0, 0.0).is_err());
        assert!(UtilityFunction::power(1.0, 1.0).is_err());
        assert!(UtilityFunction::power(1.0, 1.5).is_err());
    }

    #[test]
    fn kinked_crossover_located_at_one() {
        let u = kinked_min_sqrt();
        assert_eq!(u.crossovers().len(), 1);
        assert_relative_eq!(u.crossovers()[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(u.eval(0.25), 0.25, max_relative = 1e-15);
        assert_relative_eq!(u.eval(4.0), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn kinked_subgradient_interval_at_kink() {
        let u = kinked_min_sqrt();
        let s = u.subgradient(1.0);
        assert_relative_eq!(s.lower, 0.5, max_relative = 1e-12);
        assert_relative_eq!(s.upper, 1.0, max_relative = 1e-12);
        // Smooth points on either side.
        let left = u.subgradient(0.5);
        assert_eq!(left.lower, left.upper);
        assert_relative_eq!(left.lower, 1.0, max_relative = 1e-12);
        let right = u.subgradient(4.0);
        assert_relative_eq!(right.lower, 0.25, max_relative = 1e-12);
        assert_eq!(u.kinks(), vec![1.0]);
    }

    #[test]
    fn validation_passes_for_admissible_families() {
        let cfg = ValidationConfig::default();
        for u in [
            UtilityFunction::power(1.0, 0.5).unwrap(),
            UtilityFunction::power_sum(vec![(1.0, 0.3), (1.0, 0.7)]).unwrap(),
            kinked_min_sqrt(),
        ] {
            let report = u.validate(&cfg);
            assert!(report.passed(), "expected pass, got:\n{report}");
        }
    }

    #[test]
    fn validation_rejects_linear_growth() {
        let u = UtilityFunction::min_of_pieces(vec![ConcaveBranch::Affine {
            slope: 1.0,
            intercept: 0.0,
        }])
        .unwrap();
        let report = u.validate(&ValidationConfig::default());
        assert!(!report.passed());
        let growth = report.checks.iter().find(|c| c.name == "power_growth").unwrap();
        assert!(!growth.passed, "linear utility must fail the growth check");
    }

    #[test]
    fn validation_rejects_convex_square() {
        let u = UtilityFunction::min_of_pieces(vec![ConcaveBranch::PowerTerms {
            terms: vec![(1.0, 2.0)],
            offset: 0.0,
        }])
        .unwrap();
        let report = u.validate(&ValidationConfig::default());
        let concave = report.checks.iter().find(|c| c.name == "concave").unwrap();
        assert!(!concave.passed, "x^2 must fail the concavity check");
    }

    #[test]
    fn validation_rejects_bounded_tail() {
        // min(x, 1): flat cap at 1 — bounded, not admissible.
        let u = UtilityFunction::min_of_pieces(vec![
            ConcaveBranch::Affine { slope: 1.0, intercept: 0.0 },
            ConcaveBranch::Affine { slope: 0.0, intercept: 1.0 },
        ])
        .unwrap();
        let report = u.validate(&ValidationConfig::default());
        let unb = report.checks.iter().find(|c| c.name == "unbounded").unwrap();
        assert!(!unb.passed, "bounded utility must fail the unboundedness check");
    }

    #[test]
    fn tabulated_interpolates_and_extrapolates() {
        let u = UtilityFunction::tabulated(
            vec![0.0, 1.0, 2.0],
            vec![0.0, 1.0, 1.5],
            0.5,
        )
        .unwrap();
        assert_relative_eq!(u.eval(0.5), 0.5, max_relative = 1e-15);
        assert_relative_eq!(u.eval(1.5), 1.25, max_relative = 1e-15);
        // Tail: slope-matched power, continuous at the junction.
        assert_relative_eq!(u.eval(2.0), 1.5, max_relative = 1e-14);
        let s = u.subgradient(2.0);
        assert_relative_eq!(s.lower, 0.5, max_relative = 1e-12);
        // Node kink: interval [0.5, 1.0] at x = 1.
        let k = u.subgradient(1.0);
        assert_relative_eq!(k.lower, 0.5, max_relative = 1e-12);
        assert_relative_eq!(k.upper, 1.0, max_relative = 1e-12);
        assert!(u.validate(&ValidationConfig::default()).passed());
    }

    #[test]
    fn crossover_rejects_misordered_branches() {
        // Reversed activity order: √x then x never satisfies "first branch
        // below before the crossover".
        let r = UtilityFunction::min_of_pieces(vec![
            ConcaveBranch::PowerTerms { terms: vec![(1.0, 0.5)], offset: 0.0 },
            ConcaveBranch::Affine { slope: 1.0, intercept: 0.0 },
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn curvature_errors_at_kink_and_works_inside_branches() {
        let u = kinked_min_sqrt();
        assert!(u.curvature(1.0).is_err());
        assert_relative_eq!(u.curvature(0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(u.curvature(4.0).unwrap(), -0.25 * 0.125, max_relative = 1e-12);
    }
}
