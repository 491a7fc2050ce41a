//! Legendre conjugates `Ũ(y) = sup_{x ≥ 0} {U(x) − x y}` of admissible
//! utilities, with piecewise closed forms wherever the family structure
//! allows.
//!
//! For concave `U` with `U(0) = 0` the conjugate is nonincreasing, convex,
//! with `Ũ(0+) = ∞` (unboundedness of `U`) and `Ũ(∞) = 0`, and inherits the
//! dual growth bound
//!
//! ```text
//! 0 ≤ Ũ(y) ≤ L̂ (1 + y^{-p/(1-p)}),   L̂ = max{ L, (L p)^{1/(1-p)} (1/p − 1) }.
//! ```
//!
//! Structure dictionary (dual side ↔ primal side):
//! - a kink of `U` at `x_c` with superdifferential `[a, b]` ⇒ `Ũ` is affine
//!   `U(x_c) − x_c·y` on `(a, b)` (maximizer pinned at the kink),
//! - an affine run of `U` with slope `s` ⇒ `Ũ` has a kink at `y = s`,
//! - a finite initial slope `U'(0+)` ⇒ `Ũ ≡ 0` on `[U'(0+), ∞)` (dual flat
//!   region), recorded as [`DualUtility::support_bound`],
//! - a pure power region `c x^p (+ d)` ⇒ a power piece
//!   `c(1−p)(cp)^{p/(1−p)} y^{−p/(1−p)} (+ d)`.
//!
//! All regime boundaries are recorded as breakpoints so that downstream
//! quadrature can align integration panels with them.

use super::{UtilityError, UtilityFamily, UtilityFunction};

/// `L̂ = max{L, (L·p)^{1/(1−p)} · (1/p − 1)}`: the coefficient in the dual
/// growth bound `Ũ(y) ≤ L̂ (1 + y^{-p/(1-p)})` implied by `U ≤ L(1 + x^p)`.
pub fn dual_growth_coef(l: f64, p: f64) -> f64 {
    assert!(l > 0.0 && p > 0.0 && p < 1.0, "dual growth needs L > 0 and p in (0, 1)");
    let candidate = (l * p).powf(1.0 / (1.0 - p)) * (1.0 / p - 1.0);
    l.max(candidate)
}

/// Dual growth certificate `Ũ(y) ≤ coef · (1 + y^{-exponent})`, `exponent > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualGrowthBound {
    pub coef: f64,
    pub exponent: f64,
}

/// One closed-form (or numeric) regime of the conjugate.
#[derive(Debug, Clone, PartialEq)]
pub enum DualPiece {
    /// `Ũ ≡ 0`: `y` at or beyond the initial slope of `U`.
    Zero,
    /// `value + slope·y` with `slope = −x_kink`: maximizer pinned at a kink.
    Affine { value: f64, slope: f64 },
    /// `coef·y^{−r} + offset`: maximizer inside a pure power region.
    Power { coef: f64, r: f64, offset: f64 },
    /// Maximizer found per evaluation by the bracketed subgradient solver.
    Numeric,
}

/// The Legendre conjugate of a validated utility.
#[derive(Debug, Clone)]
pub struct DualUtility {
    source: UtilityFunction,
    growth: DualGrowthBound,
    /// Ascending regime boundaries; `pieces.len() == breakpoints.len() + 1`.
    breakpoints: Vec<f64>,
    pieces: Vec<DualPiece>,
    /// Certified tabulations for [`DualPiece::Numeric`] regimes, keyed by
    /// piece index (sparse: at most one per numeric piece).
    numeric_tables: Vec<(usize, NumericTable)>,
    /// `Ũ(y) = 0` for `y ≥` this bound (the initial slope of `U`, if finite).
    support_bound: Option<f64>,
}

/// Arguments are clamped to this range before evaluating the conjugate, so
/// kernel integration never feeds denormal or overflowing values in.
pub const DUAL_ARG_CLAMP: (f64, f64) = (1e-300, 1e300);

impl DualUtility {
    pub(super) fn build(u: &UtilityFunction) -> Result<Self, UtilityError> {
        let growth = u.growth().ok_or_else(|| {
            UtilityError::NotAdmissible("no growth certificate available".into())
        })?;
        let l_hat = dual_growth_coef(growth.coef, growth.exponent);
        let dual_growth = DualGrowthBound {
            coef: l_hat,
            exponent: growth.exponent / (1.0 - growth.exponent),
        };
        let s0 = u.initial_slope();
        let support_bound = s0.is_finite().then_some(s0);

        let (breakpoints, pieces) = match u.family() {
            UtilityFamily::Power { scale, exponent } => {
                (Vec::new(), vec![power_piece(*scale, *exponent, 0.0)])
            }
            UtilityFamily::PowerSum { .. } => (Vec::new(), vec![DualPiece::Numeric]),
            UtilityFamily::MinOfConcavePieces { .. } | UtilityFamily::Tabulated { .. } => {
                classify_pieces(u)?
            }
        };

        // Tabulate numeric regimes so kernel quadrature evaluates them at
        // closed-form cost instead of one bracketed solve per node.
        let mut numeric_tables = Vec::new();
        for (idx, piece) in pieces.iter().enumerate() {
            if *piece == DualPiece::Numeric {
                let y_lo = if idx == 0 { 0.0 } else { breakpoints[idx - 1] };
                let y_hi = if idx == pieces.len() - 1 { f64::INFINITY } else { breakpoints[idx] };
                if let Some(table) = NumericTable::build(u, y_lo, y_hi)? {
                    numeric_tables.push((idx, table));
                }
            }
        }

        let dual = DualUtility {
            source: u.clone(),
            growth: dual_growth,
            breakpoints,
            pieces,
            numeric_tables,
            support_bound,
        };
        dual.verify_against_solver()?;
        Ok(dual)
    }

    /// Cross-check every regime against the generic subgradient solver at
    /// interior probe points; fails construction loudly on disagreement.
    fn verify_against_solver(&self) -> Result<(), UtilityError> {
        for y in self.probe_points() {
            let by_piece = self.eval(y);
            let x = maximizer(&self.source, y)?;
            let direct = self.source.eval(x) - x * y;
            let tol = 1e-9 * (1.0 + by_piece.abs().max(direct.abs()));
            if (by_piece - direct).abs() > tol {
                return Err(UtilityError::ConjugateSolver(format!(
                    "piecewise conjugate disagrees with direct solve at y = {y:.6e}: {by_piece:.12e} vs {direct:.12e}"
                )));
            }
        }
        Ok(())
    }

    fn probe_points(&self) -> Vec<f64> {
        let mut ys = Vec::new();
        let bps = &self.breakpoints;
        if bps.is_empty() {
            return vec![0.25, 1.0, 4.0];
        }
        ys.push(bps[0] * 0.5);
        ys.push(bps[0] * 0.25);
        for w in bps.windows(2) {
            ys.push(0.5 * (w[0] + w[1]));
            ys.push(0.75 * w[0] + 0.25 * w[1]);
        }
        ys.push(bps[bps.len() - 1] * 2.0);
        ys
    }

    pub fn source(&self) -> &UtilityFunction {
        &self.source
    }

    /// `Ũ(y) ≤ coef (1 + y^{-exponent})`.
    pub fn growth(&self) -> DualGrowthBound {
        self.growth
    }

    /// Ascending regime boundaries (kinks and curvature breaks of `Ũ`).
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// `Ũ ≡ 0` at and beyond this value (finite initial slope of `U`).
    pub fn support_bound(&self) -> Option<f64> {
        self.support_bound
    }

    fn piece_index(&self, y: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= y)
    }

    fn table_for(&self, idx: usize) -> Option<&NumericTable> {
        self.numeric_tables.iter().find(|(i, _)| *i == idx).map(|(_, t)| t)
    }

    /// `Ũ(y)`, `y > 0` (clamped to [`DUAL_ARG_CLAMP`]).
    pub fn eval(&self, y: f64) -> f64 {
        assert!(y > 0.0, "conjugate argument must be positive, got {y}");
        let y = y.clamp(DUAL_ARG_CLAMP.0, DUAL_ARG_CLAMP.1);
        if let Some(s) = self.support_bound {
            if y >= s {
                return 0.0;
            }
        }
        let idx = self.piece_index(y);
        match &self.pieces[idx] {
            DualPiece::Zero => 0.0,
            DualPiece::Affine { value, slope } => value + slope * y,
            DualPiece::Power { coef, r, offset } => coef * y.powf(-r) + offset,
            DualPiece::Numeric => {
                if let Some(v) = self.table_for(idx).and_then(|t| t.value_at(y)) {
                    return v;
                }
                let x = maximizer(&self.source, y).expect("verified at construction");
                self.source.eval(x) - x * y
            }
        }
    }

    /// Derivative `Ũ'(y) = −x*(y)` (defined a.e.; right regime at breakpoints).
    pub fn derivative(&self, y: f64) -> f64 {
        assert!(y > 0.0, "conjugate argument must be positive, got {y}");
        let y = y.clamp(DUAL_ARG_CLAMP.0, DUAL_ARG_CLAMP.1);
        if let Some(s) = self.support_bound {
            if y >= s {
                return 0.0;
            }
        }
        let idx = self.piece_index(y);
        match &self.pieces[idx] {
            DualPiece::Zero => 0.0,
            DualPiece::Affine { slope, .. } => *slope,
            DualPiece::Power { coef, r, .. } => -r * coef * y.powf(-r - 1.0),
            DualPiece::Numeric => {
                if let Some(x) = self.table_for(idx).and_then(|t| t.maximizer_at(y)) {
                    return -x;
                }
                -maximizer(&self.source, y).expect("verified at construction")
            }
        }
    }

    /// The maximizer `x*(y) = −Ũ'(y)` (a.e.).
    pub fn maximizer(&self, y: f64) -> f64 {
        -self.derivative(y)
    }
}

/// Certified log-log tabulation of one numeric conjugate regime.
///
/// The regime is parameterized by its maximizer: sweeping `x` over a log
/// grid yields exact samples with no root-finding at all, because the
/// first-order condition gives `y = U'(x)`, `Ũ(y) = U(x) − x·U'(x)`, and
/// `Ũ'(y) = −x` in closed form, with the exact log-slopes
///
/// ```text
/// d ln Ũ / d ln y = −x·y/Ũ ,     d ln x* / d ln y = y / (x·U''(x)) .
/// ```
///
/// Between nodes, `ln Ũ` and `ln x*` are cubic Hermite in `s = ln y`; in
/// that coordinate pure-power regimes are exactly affine, so nodes
/// concentrate only where regimes blend. Every cell is certified at
/// construction against exact probes at its log-quarter points and bisected
/// until the worst probe error (a relative error, since it is measured in
/// logs) falls below [`NumericTable::CELL_TOL`]; queries outside the tabulated
/// window fall back to the bracketed solver unchanged.
#[derive(Debug, Clone, PartialEq)]
struct NumericTable {
    /// Ascending `s = ln y`.
    s: Vec<f64>,
    /// `ln Ũ(e^s)` at the nodes and its exact derivative in `s`.
    g: Vec<f64>,
    dg: Vec<f64>,
    /// `ln x*(e^s)` at the nodes and its exact derivative in `s`.
    phi: Vec<f64>,
    dphi: Vec<f64>,
}

/// One exact sample of the numeric regime at maximizer `x`.
#[derive(Debug, Clone, Copy)]
struct RegimeNode {
    s: f64,
    g: f64,
    dg: f64,
    phi: f64,
    dphi: f64,
}

/// Cubic Hermite on `[s0, s1]` with values `v` and derivatives `d`.
fn hermite(s0: f64, s1: f64, v0: f64, d0: f64, v1: f64, d1: f64, s: f64) -> f64 {
    let h = s1 - s0;
    let t = (s - s0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = 3.0 * t2 - 2.0 * t3;
    let h11 = t3 - t2;
    h00 * v0 + h10 * h * d0 + h01 * v1 + h11 * h * d1
}

impl NumericTable {
    /// Accepted per-cell probe error (relative, both curves being logs).
    const CELL_TOL: f64 = 5e-11;
    /// Cells narrower than this in `s` are roundoff-dominated; accept them.
    const MIN_WIDTH: f64 = 1e-9;
    const MAX_DEPTH: u32 = 48;
    /// Maximizer range for regimes with unbounded `y`-ends; wide enough to
    /// cover every argument kernel quadrature can produce for moderate
    /// exponents, while `x^{p−2}` (the curvature power, worst exponent in
    /// magnitude) stays inside normal `f64` range for all `p ∈ (0, 1)`.
    const X_CAP: (f64, f64) = (1e-140, 1e140);
    /// Initial log-uniform density before adaptive refinement.
    const NODES_PER_DECADE: f64 = 8.0;

    /// Tabulate the regime whose maximizers cover the `y`-interval
    /// `(y_lo, y_hi)` (either end may be open at 0 / ∞). Returns `None` when
    /// the maximizer interval is too narrow to carry a table.
    fn build(
        u: &UtilityFunction,
        y_lo: f64,
        y_hi: f64,
    ) -> Result<Option<NumericTable>, UtilityError> {
        // Maximizers decrease in y: the low-y edge carries the large-x end.
        let x_hi = if y_lo <= 0.0 {
            Self::X_CAP.1
        } else {
            maximizer(u, y_lo)?.min(Self::X_CAP.1)
        };
        let x_lo = if !y_hi.is_finite() {
            Self::X_CAP.0
        } else {
            maximizer(u, y_hi)?.max(Self::X_CAP.0)
        };
        // Stay strictly clear of kink-snap zones at regime edges; the
        // uncovered slivers fall back to the exact solver.
        let x_hi = x_hi * (1.0 - 1e-6);
        let x_lo = x_lo * (1.0 + 1e-6);
        if !(x_lo > 0.0) || !(x_hi > x_lo * (1.0 + 1e-9)) {
            return Ok(None);
        }

        let decades = (x_hi / x_lo).log10();
        let cells = ((decades * Self::NODES_PER_DECADE).ceil() as usize).clamp(8, 40_000);
        let (p_lo, p_hi) = (x_lo.ln(), x_hi.ln());
        // Descending x gives ascending s = ln U'(x).
        let mut coarse = Vec::with_capacity(cells + 1);
        for k in 0..=cells {
            let x = (p_hi + (p_lo - p_hi) * (k as f64 / cells as f64)).exp();
            coarse.push(Self::node_at(u, x)?);
        }

        let mut nodes: Vec<RegimeNode> = Vec::with_capacity(2 * coarse.len());
        nodes.push(coarse[0]);
        for w in coarse.windows(2) {
            // Skip coarse nodes that do not advance s (possible only for
            // nearly slope-flat data at roundoff scale).
            let prev = *nodes.last().unwrap();
            if !(w[1].s > prev.s + 1e-15 * (1.0 + prev.s.abs())) {
                continue;
            }
            Self::refine(u, prev, w[1], 0, &mut nodes)?;
            nodes.push(w[1]);
        }
        if nodes.len() < 2 {
            return Ok(None);
        }

        let mut table = NumericTable {
            s: Vec::with_capacity(nodes.len()),
            g: Vec::with_capacity(nodes.len()),
            dg: Vec::with_capacity(nodes.len()),
            phi: Vec::with_capacity(nodes.len()),
            dphi: Vec::with_capacity(nodes.len()),
        };
        for n in nodes {
            table.s.push(n.s);
            table.g.push(n.g);
            table.dg.push(n.dg);
            table.phi.push(n.phi);
            table.dphi.push(n.dphi);
        }
        Ok(Some(table))
    }

    /// Exact sample at maximizer `x`, which must sit strictly inside a
    /// smooth, strictly concave stretch of `U`.
    fn node_at(u: &UtilityFunction, x: f64) -> Result<RegimeNode, UtilityError> {
        let sub = u.subgradient(x);
        let y = sub.lower;
        if !(y > 0.0) || !y.is_finite() || sub.upper != sub.lower {
            return Err(UtilityError::ConjugateSolver(format!(
                "conjugate tabulation sampled a nonsmooth or slope-degenerate point at x = {x:.6e}"
            )));
        }
        let w = u.curvature(x)?;
        if !(w < 0.0) || !w.is_finite() {
            return Err(UtilityError::ConjugateSolver(format!(
                "conjugate tabulation needs strict concavity; U''({x:.3e}) = {w:.3e}"
            )));
        }
        let val = u.eval(x) - x * y;
        if !(val > 0.0) || !val.is_finite() {
            return Err(UtilityError::ConjugateSolver(format!(
                "conjugate value {val:.3e} at y = {y:.3e} is not positive; cannot tabulate in logs"
            )));
        }
        Ok(RegimeNode {
            s: y.ln(),
            g: val.ln(),
            dg: -x * y / val,
            phi: x.ln(),
            dphi: y / (x * w),
        })
    }

    /// Worst probe error of the cell `[a, b]` at its log-quarter points.
    fn cell_error(u: &UtilityFunction, a: &RegimeNode, b: &RegimeNode) -> Result<f64, UtilityError> {
        let mut worst = 0.0_f64;
        for f in [0.25, 0.5, 0.75] {
            let x = (a.phi * (1.0 - f) + b.phi * f).exp();
            let n = Self::node_at(u, x)?;
            let eg = (hermite(a.s, b.s, a.g, a.dg, b.g, b.dg, n.s) - n.g).abs();
            let ep = (hermite(a.s, b.s, a.phi, a.dphi, b.phi, b.dphi, n.s) - n.phi).abs();
            worst = worst.max(eg).max(ep);
        }
        Ok(worst)
    }

    /// Recursively bisect `[a, b]` (in maximizer log-space) until certified,
    /// pushing the interior nodes in ascending `s` order.
    fn refine(
        u: &UtilityFunction,
        a: RegimeNode,
        b: RegimeNode,
        depth: u32,
        out: &mut Vec<RegimeNode>,
    ) -> Result<(), UtilityError> {
        if b.s - a.s <= Self::MIN_WIDTH || Self::cell_error(u, &a, &b)? <= Self::CELL_TOL {
            return Ok(());
        }
        if depth >= Self::MAX_DEPTH {
            return Err(UtilityError::ConjugateSolver(format!(
                "conjugate tabulation did not converge on ln y in [{:.6e}, {:.6e}]",
                a.s, b.s
            )));
        }
        let m = Self::node_at(u, (0.5 * (a.phi + b.phi)).exp())?;
        if !(m.s > a.s && m.s < b.s) {
            // Roundoff-degenerate split: the cell is as narrow as the data
            // allows, so keep it rather than manufacture a zero-width cell.
            return Ok(());
        }
        Self::refine(u, a, m, depth + 1, out)?;
        out.push(m);
        Self::refine(u, m, b, depth + 1, out)
    }

    /// Cell index for `s`, or `None` outside the tabulated window.
    fn locate(&self, y: f64) -> Option<(usize, f64)> {
        let s = y.ln();
        if !(s >= self.s[0]) || !(s <= self.s[self.s.len() - 1]) {
            return None;
        }
        let i = self.s.partition_point(|&v| v <= s).clamp(1, self.s.len() - 1) - 1;
        Some((i, s))
    }

    /// `Ũ(y)` by Hermite interpolation, or `None` outside the window.
    fn value_at(&self, y: f64) -> Option<f64> {
        let (i, s) = self.locate(y)?;
        Some(
            hermite(
                self.s[i],
                self.s[i + 1],
                self.g[i],
                self.dg[i],
                self.g[i + 1],
                self.dg[i + 1],
                s,
            )
            .exp(),
        )
    }

    /// `x*(y)` by Hermite interpolation, or `None` outside the window.
    fn maximizer_at(&self, y: f64) -> Option<f64> {
        let (i, s) = self.locate(y)?;
        Some(
            hermite(
                self.s[i],
                self.s[i + 1],
                self.phi[i],
                self.dphi[i],
                self.phi[i + 1],
                self.dphi[i + 1],
                s,
            )
            .exp(),
        )
    }
}

/// Conjugate piece of a pure power region `scale·x^p + offset`.
fn power_piece(scale: f64, p: f64, offset: f64) -> DualPiece {
    let coef = scale * (1.0 - p) * (scale * p).powf(p / (1.0 - p));
    DualPiece::Power { coef, r: p / (1.0 - p), offset }
}

/// Utility whose conjugate is exactly `coef · y^{−r}`: `p = r/(1+r)` and the
/// scale solving `scale(1−p)(scale·p)^{p/(1−p)} = coef`. Used to pin closed
/// forms in oracles and self-tests.
pub fn power_matching_dual(r: f64, coef: f64) -> UtilityFunction {
    assert!(r > 0.0 && coef > 0.0);
    let p = r / (1.0 + r);
    let scale = (coef / ((1.0 - p) * p.powf(p / (1.0 - p)))).powf(1.0 - p);
    UtilityFunction::power(scale, p).expect("parameters in range by construction")
}

/// Classify conjugate regimes for piecewise families by probing the maximizer
/// between candidate breakpoints.
fn classify_pieces(u: &UtilityFunction) -> Result<(Vec<f64>, Vec<DualPiece>), UtilityError> {
    // Candidate boundaries: every slope attained at a structural point.
    let mut cand: Vec<f64> = Vec::new();
    match u.family() {
        UtilityFamily::MinOfConcavePieces { branches } => {
            for (j, &c) in u.crossovers().iter().enumerate() {
                cand.push(branches[j].slope(c));
                cand.push(branches[j + 1].slope(c));
            }
        }
        UtilityFamily::Tabulated { xs, ys, .. } => {
            for i in 1..xs.len() {
                cand.push((ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]));
            }
        }
        _ => unreachable!("classify_pieces only serves piecewise families"),
    }
    let s0 = u.initial_slope();
    if s0.is_finite() {
        cand.push(s0);
    }
    cand.retain(|s| s.is_finite() && *s > 0.0);
    cand.sort_by(|a, b| a.total_cmp(b));
    cand.dedup_by(|a, b| (*a - *b).abs() <= 1e-10 * (1.0 + b.abs()));

    let breakpoints = cand;
    let mut pieces = Vec::with_capacity(breakpoints.len() + 1);
    for seg in 0..=breakpoints.len() {
        let ym = segment_midpoint(&breakpoints, seg);
        pieces.push(classify_segment(u, ym)?);
    }
    Ok((breakpoints, pieces))
}

fn segment_midpoint(bps: &[f64], seg: usize) -> f64 {
    if bps.is_empty() {
        return 1.0;
    }
    if seg == 0 {
        bps[0] * 0.5
    } else if seg == bps.len() {
        bps[bps.len() - 1] * 2.0
    } else {
        0.5 * (bps[seg - 1] + bps[seg])
    }
}

fn classify_segment(u: &UtilityFunction, ym: f64) -> Result<DualPiece, UtilityError> {
    let x = maximizer(u, ym)?;
    if x == 0.0 {
        return Ok(DualPiece::Zero);
    }
    // Pinned at a kink? Relative tolerance only: structural points are
    // strictly positive and may sit at tiny scales, where an absolute floor
    // would swallow genuinely interior maximizers.
    let snap = |c: f64| (x - c).abs() <= 1e-9 * c.abs();
    match u.family() {
        UtilityFamily::MinOfConcavePieces { branches } => {
            if let Some(&c) = u.crossovers().iter().find(|&&c| snap(c)) {
                return Ok(DualPiece::Affine { value: u.eval(c), slope: -c });
            }
            let idx = u.crossovers().partition_point(|&c| c < x);
            match &branches[idx] {
                super::ConcaveBranch::Affine { slope, .. } => {
                    Err(UtilityError::ConjugateSolver(format!(
                        "maximizer {x:.6e} sits inside an affine branch (slope {slope}); \
                         dual segment at y = {ym:.6e} is degenerate"
                    )))
                }
                super::ConcaveBranch::PowerTerms { terms, offset } => {
                    if terms.len() == 1 && terms[0].1 < 1.0 {
                        Ok(power_piece(terms[0].0, terms[0].1, *offset))
                    } else {
                        Ok(DualPiece::Numeric)
                    }
                }
            }
        }
        UtilityFamily::Tabulated { xs, ys, tail_exponent } => {
            let n = xs.len();
            for i in 1..n - 1 {
                if snap(xs[i]) {
                    return Ok(DualPiece::Affine { value: ys[i], slope: -xs[i] });
                }
            }
            if x >= xs[n - 1] * (1.0 - 1e-9) {
                // Tail region: U = (ys[n-1] − κ·xn^q) + κ·x^q.
                let kappa = u.tail_coef;
                let q = *tail_exponent;
                let offset = ys[n - 1] - kappa * xs[n - 1].powf(q);
                return Ok(match power_piece(kappa, q, offset) {
                    DualPiece::Power { coef, r, .. } => DualPiece::Power { coef, r, offset },
                    other => other,
                });
            }
            Err(UtilityError::ConjugateSolver(format!(
                "maximizer {x:.6e} sits inside a linear panel; dual segment at y = {ym:.6e} is degenerate"
            )))
        }
        _ => unreachable!(),
    }
}

/// Bracketed subgradient solve for `x*(y) = argmax {U(x) − x y}`:
/// monotone bisection on the optimality condition `y ∈ ∂U(x)`, with
/// geometric bracket expansion on both sides, falling back to `x = 0` when
/// `y ≥ U'(0+)`. The bisection runs in log space so maximizers keep full
/// relative accuracy at any positive scale (they can sit arbitrarily close
/// to the origin when a branch switch does).
pub(crate) fn maximizer(u: &UtilityFunction, y: f64) -> Result<f64, UtilityError> {
    const Y_RESIDUAL_REL: f64 = 1e-10;
    const WIDTH_REL: f64 = 1e-14;
    debug_assert!(y > 0.0);
    if y >= u.initial_slope() {
        return Ok(0.0);
    }
    let tol = Y_RESIDUAL_REL * (1.0 + y);
    // Expand to the right until the right-slope drops to or below y.
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    let mut guard = 0;
    while u.subgradient(hi).lower > y {
        lo = hi;
        hi *= 8.0;
        guard += 1;
        if guard > 120 || hi > 1e290 {
            return Err(UtilityError::ConjugateSolver(format!(
                "slope never drops below y = {y:.3e}; conjugate unbounded"
            )));
        }
    }
    if lo == 0.0 {
        // Descend geometrically until the right-slope rises above y; this
        // terminates because the slope tends to U'(0+) > y at the origin.
        lo = hi;
        loop {
            lo *= 0.125;
            if u.subgradient(lo).lower > y {
                break;
            }
            hi = lo;
            guard += 1;
            if guard > 400 || lo < 1e-290 {
                return Err(UtilityError::ConjugateSolver(format!(
                    "no bracket for the maximizer at y = {y:.3e}: slope \
                     stays at or below y down to x = {lo:.3e}"
                )));
            }
        }
    }
    // Invariant: right-slope(lo) > y ≥ right-slope(hi), 0 < lo < hi.
    let (mut tlo, mut thi) = (lo.ln(), hi.ln());
    for _ in 0..400 {
        let tm = 0.5 * (tlo + thi);
        let mid = tm.exp();
        let sub = u.subgradient(mid);
        if sub.contains(y, tol) {
            return Ok(mid);
        }
        if sub.lower > y {
            tlo = tm;
        } else {
            thi = tm;
        }
        if thi - tlo <= WIDTH_REL {
            break;
        }
    }
    Ok((0.5 * (tlo + thi)).exp())
}

#[cfg(test)]
mod tests {
    use super::super::{kinked_min_sqrt, UtilityFunction};
    use super::*;
    use crate::numerics::logspace;
    use approx::assert_relative_eq;

    #[test]
    fn dual_growth_coef_reference_values() {
        // L = 1, p = 1/2: (0.5)^2 · 1 = 0.25 < 1.
        assert_relative_eq!(dual_growth_coef(1.0, 0.5), 1.0, max_relative = 1e-15);
        // L = 4, p = 1/2: (2)^2 · 1 = 4 — the two branches tie.
        assert_relative_eq!(dual_growth_coef(4.0, 0.5), 4.0, max_relative = 1e-15);
    }

    #[test]
    fn power_conjugate_closed_form() {
        let u = UtilityFunction::power(1.0, 0.5).unwrap();
        let d = u.conjugate().unwrap();
        assert_relative_eq!(d.eval(1.0), 0.25, max_relative = 1e-12);
        assert_relative_eq!(d.eval(0.5), 0.5, max_relative = 1e-12);
        assert_relative_eq!(d.derivative(0.5), -1.0, max_relative = 1e-12);
        assert!(d.support_bound().is_none());
        assert!(d.breakpoints().is_empty());
    }

    #[test]
    fn kinked_conjugate_piecewise_closed_form() {
        let d = kinked_min_sqrt().conjugate().unwrap();
        assert_eq!(d.breakpoints().len(), 2);
        assert_relative_eq!(d.breakpoints()[0], 0.5, max_relative = 1e-10);
        assert_relative_eq!(d.breakpoints()[1], 1.0, max_relative = 1e-10);
        assert_relative_eq!(d.eval(0.25), 1.0, max_relative = 1e-10);
        assert_relative_eq!(d.eval(0.75), 0.25, max_relative = 1e-10);
        assert_eq!(d.eval(2.0), 0.0);
        assert_eq!(d.support_bound(), Some(1.0));
        // Maximizer map: 1/(4y²) below 1/2, pinned at the kink on (1/2, 1), 0 above.
        assert_relative_eq!(d.maximizer(0.25), 4.0, max_relative = 1e-10);
        assert_relative_eq!(d.maximizer(0.75), 1.0, max_relative = 1e-10);
        assert_eq!(d.maximizer(2.0), 0.0);
    }

    #[test]
    fn power_matching_dual_round_trip() {
        for (r, coef) in [(0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (1.0, 0.25)] {
            let u = power_matching_dual(r, coef);
            let d = u.conjugate().unwrap();
            for y in [0.1, 1.0, 10.0] {
                assert_relative_eq!(d.eval(y), coef * y.powf(-r), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn power_sum_conjugate_matches_grid_search() {
        let u = UtilityFunction::power_sum(vec![(1.0, 0.3), (1.0, 0.7)]).unwrap();
        let d = u.conjugate().unwrap();
        for y in [0.25, 1.0, 3.0] {
            let grid = grid_search_conjugate(&u, y);
            assert_relative_eq!(d.eval(y), grid, max_relative = 1e-7);
        }
    }

    #[test]
    fn tabulated_conjugate_structure() {
        let u = UtilityFunction::tabulated(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 1.5], 0.5).unwrap();
        let d = u.conjugate().unwrap();
        // Segment slopes 1.0 and 0.5 are the regime boundaries.
        assert_eq!(d.breakpoints().len(), 2);
        assert_eq!(d.support_bound(), Some(1.0));
        // y in (0.5, 1): pinned at the node x = 1.
        assert_relative_eq!(d.eval(0.75), 1.0 - 0.75, max_relative = 1e-10);
        // y below 0.5: in the power tail.
        for y in [0.1, 0.25, 0.4] {
            let grid = grid_search_conjugate(&u, y);
            assert_relative_eq!(d.eval(y), grid, max_relative = 1e-6);
        }
        assert_eq!(d.eval(1.5), 0.0);
    }

    #[test]
    fn fenchel_young_inequality_random_points() {
        let utils = vec![
            UtilityFunction::power(2.0, 0.4).unwrap(),
            kinked_min_sqrt(),
            UtilityFunction::power_sum(vec![(0.5, 0.3), (2.0, 0.6)]).unwrap(),
        ];
        for u in &utils {
            let d = u.conjugate().unwrap();
            for &x in &[0.01, 0.5, 1.0, 3.7, 42.0] {
                for &y in &[0.05, 0.3, 1.0, 2.5, 9.0] {
                    let lhs = u.eval(x);
                    let rhs = d.eval(y) + x * y;
                    assert!(
                        lhs <= rhs * (1.0 + 1e-10) + 1e-12,
                        "Fenchel–Young violated: U({x}) = {lhs} > {rhs}"
                    );
                }
            }
        }
    }

    /// Two-stage log-grid search oracle for `sup_x {U(x) − x y}`.
    fn grid_search_conjugate(u: &UtilityFunction, y: f64) -> f64 {
        let mut best_x = 0.0;
        let mut best = 0.0; // x = 0 always feasible, value U(0) = 0
        for x in logspace(1e-9, 1e9, 4001) {
            let v = u.eval(x) - x * y;
            if v > best {
                best = v;
                best_x = x;
            }
        }
        if best_x > 0.0 {
            for x in logspace(best_x * 0.98, best_x * 1.02, 4001) {
                let v = u.eval(x) - x * y;
                if v > best {
                    best = v;
                }
            }
        }
        best
    }
}
