//! Market primitives: piecewise-constant coefficients, trading cones with
//! polar calculus, the cone-constrained least-squares problem that produces
//! the effective price of risk, and the resulting deterministic time change.
//!
//! The model has `n` risky assets with drift `b(t)` and invertible volatility
//! `σ(t)`, both piecewise constant on a time grid, zero interest rate, and
//! controls (wealth fractions) constrained to a closed convex cone `K`.
//! For each interval the solver computes
//!
//! ```text
//! π̂ = argmin_{π̃ ∈ K°}  |θ + σ⁻¹ π̃|²,    θ = σ⁻¹ b,
//! θ̂ = θ + σ⁻¹ π̂,
//! ```
//!
//! where `K° = {p : p·v ≥ 0 for all v ∈ K}` is the (positive) polar cone.
//! The effective price of risk `θ̂` drives everything downstream: the dual
//! heat flow runs at speed `|θ̂(t)|²`, the time change is
//! `τ(t) = ½ ∫_t^T |θ̂(s)|² ds`, and the optimal control points along
//! `(σᵀ)⁻¹ θ̂`, which the KKT conditions place inside `K`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market data: {0}")]
    InvalidData(String),
    #[error("volatility matrix on interval {0} is singular")]
    SingularVolatility(usize),
    #[error("cone dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cone least-squares solver failed: {0}")]
    QpFailure(String),
    #[error("degenerate effective market: {0}")]
    NotParabolic(String),
}

/// A closed convex cone of admissible portfolio proportions.
///
/// `FinitelyGenerated` with no generators is the zero cone `{0}`;
/// `HalfSpaces` with no normals would be the whole space (use `WholeSpace`).
#[derive(Debug, Clone, PartialEq)]
pub enum ConeSpec {
    /// Unconstrained trading, `K = ℝⁿ`.
    WholeSpace,
    /// Long-only trading, `K = {π : π ≥ 0}` (self-polar).
    NonnegOrthant,
    /// `K = {Σ λ_i g_i : λ ≥ 0}` for the given generators.
    FinitelyGenerated { generators: Vec<DVector<f64>> },
    /// `K = {v : n_i · v ≥ 0 for all i}`; arises as the polar of a
    /// finitely generated cone.
    HalfSpaces { normals: Vec<DVector<f64>> },
}

impl ConeSpec {
    fn rays(&self) -> Option<&[DVector<f64>]> {
        match self {
            ConeSpec::FinitelyGenerated { generators } => Some(generators),
            ConeSpec::HalfSpaces { normals } => Some(normals),
            _ => None,
        }
    }

    /// Check that every generator/normal is finite, nonzero, and of length `n`.
    pub fn check_dimension(&self, n: usize) -> Result<(), MarketError> {
        if let Some(rays) = self.rays() {
            for (i, g) in rays.iter().enumerate() {
                if g.len() != n {
                    return Err(MarketError::DimensionMismatch(format!(
                        "cone vector {i} has length {}, expected {n}",
                        g.len()
                    )));
                }
                if !g.iter().all(|v| v.is_finite()) || g.norm() == 0.0 {
                    return Err(MarketError::InvalidData(format!(
                        "cone vector {i} must be finite and nonzero"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The positive polar `K° = {p : p·v ≥ 0 for all v ∈ K}`.
    ///
    /// On the families handled here the operation is an involution:
    /// `ℝⁿ ↔ {0}`, the orthant is self-polar, and generated cones pair with
    /// half-space intersections carrying the same vectors.
    pub fn polar(&self) -> ConeSpec {
        match self {
            ConeSpec::WholeSpace => ConeSpec::FinitelyGenerated { generators: Vec::new() },
            ConeSpec::NonnegOrthant => ConeSpec::NonnegOrthant,
            ConeSpec::FinitelyGenerated { generators } => {
                if generators.is_empty() {
                    ConeSpec::WholeSpace
                } else {
                    ConeSpec::HalfSpaces { normals: generators.clone() }
                }
            }
            ConeSpec::HalfSpaces { normals } => {
                if normals.is_empty() {
                    ConeSpec::WholeSpace
                } else {
                    ConeSpec::FinitelyGenerated { generators: normals.clone() }
                }
            }
        }
    }

    /// Distance-like membership residual: zero (up to round-off) iff `v ∈ K`.
    pub fn membership_residual(&self, v: &DVector<f64>) -> f64 {
        match self {
            ConeSpec::WholeSpace => 0.0,
            ConeSpec::NonnegOrthant => -v.min().min(0.0),
            ConeSpec::HalfSpaces { normals } => normals
                .iter()
                .map(|n| (-n.dot(v) / n.norm()).max(0.0))
                .fold(0.0, f64::max),
            ConeSpec::FinitelyGenerated { generators } => {
                if generators.is_empty() {
                    return v.norm();
                }
                let a = columns_matrix(generators);
                match nnls(&a, v) {
                    Ok(lambda) => (&a * lambda - v).norm(),
                    Err(_) => f64::INFINITY,
                }
            }
        }
    }

    /// Membership with a relative tolerance.
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.membership_residual(v) <= tol * (1.0 + v.norm())
    }
}

fn columns_matrix(cols: &[DVector<f64>]) -> DMatrix<f64> {
    let n = cols[0].len();
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Lawson–Hanson nonnegative least squares: `argmin_{λ ≥ 0} |Aλ − y|²`.
fn nnls(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, MarketError> {
    let m = a.ncols();
    let scale = a.amax().max(1.0) * y.amax().max(1.0);
    let tol = 1e-12 * scale.max(1.0);
    let mut passive = vec![false; m];
    let mut lambda = DVector::<f64>::zeros(m);
    let max_outer = 60 * (m + 1);

    for _ in 0..max_outer {
        let w = a.transpose() * (y - a * &lambda);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            if !passive[i] && w[i] > tol && best.map_or(true, |(_, bw)| w[i] > bw) {
                best = Some((i, w[i]));
            }
        }
        let Some((enter, _)) = best else {
            return Ok(lambda);
        };
        passive[enter] = true;

        // Inner loop: restore feasibility of the passive-set solution.
        for _ in 0..max_outer {
            let idx: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let sub = {
                let mut s = DMatrix::zeros(a.nrows(), idx.len());
                for (j, &i) in idx.iter().enumerate() {
                    s.set_column(j, &a.column(i));
                }
                s
            };
            let z_sub = sub
                .clone()
                .svd(true, true)
                .solve(y, 1e-13)
                .map_err(|e| MarketError::QpFailure(format!("least-squares subsolve: {e}")))?;
            let mut z = DVector::<f64>::zeros(m);
            for (j, &i) in idx.iter().enumerate() {
                z[i] = z_sub[j];
            }
            if idx.iter().all(|&i| z[i] > tol) {
                lambda = z;
                break;
            }
            // Step toward z until the first passive coordinate hits zero.
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if z[i] <= tol {
                    let denom = lambda[i] - z[i];
                    if denom > 0.0 {
                        alpha = alpha.min(lambda[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                return Err(MarketError::QpFailure("nonnegative step search stalled".into()));
            }
            lambda = &lambda + (z - &lambda) * alpha;
            for &i in &idx {
                if lambda[i] <= tol {
                    lambda[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    Err(MarketError::QpFailure("active-set iteration limit exceeded".into()))
}

/// Dykstra's alternating projection onto an intersection of half-spaces
/// `{x : n_i · x ≥ 0}` (all containing the origin).
fn dykstra_project(
    x0: &DVector<f64>,
    normals: &[DVector<f64>],
    tol: f64,
    max_cycles: usize,
) -> Result<DVector<f64>, MarketError> {
    let mut x = x0.clone();
    let mut corrections = vec![DVector::<f64>::zeros(x0.len()); normals.len()];
    for _ in 0..max_cycles {
        let prev = x.clone();
        for (i, n) in normals.iter().enumerate() {
            let z = &x + &corrections[i];
            let viol = n.dot(&z);
            let proj = if viol >= 0.0 { z.clone() } else { &z - n * (viol / n.norm_squared()) };
            corrections[i] = &z - &proj;
            x = proj;
        }
        let feasible = normals.iter().all(|n| n.dot(&x) >= -tol * (1.0 + x.norm()));
        if feasible && (&x - &prev).amax() <= tol * (1.0 + x.amax()) {
            return Ok(x);
        }
    }
    Err(MarketError::QpFailure("half-space projection did not converge".into()))
}

/// KKT certificate for the cone least-squares solution.
///
/// Optimality of `π̂ = argmin_{π̃ ∈ C} |θ + σ⁻¹π̃|²` over a closed convex cone
/// `C` is equivalent to: the (half-)gradient `σ⁻ᵀ θ̂` lies in the polar `C°`,
/// and complementarity `π̂ · σ⁻ᵀ θ̂ = 0` holds.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// Membership residual of `σ⁻ᵀ θ̂` in the polar of the constraint cone
    /// (for constraint `K°` this is membership in `K` itself).
    pub gradient_membership: f64,
    /// Normalized complementarity gap `|π̂ · σ⁻ᵀ θ̂|`.
    pub complementarity: f64,
}

impl KktReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.gradient_membership <= tol && self.complementarity <= tol
    }
}

/// Solution of one interval's cone least-squares problem.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Minimizer `π̂` over the constraint cone.
    pub pi_tilde: DVector<f64>,
    /// Effective price of risk `θ̂ = θ + σ⁻¹ π̂`.
    pub theta_hat: DVector<f64>,
    /// Optimal value `|θ̂|²`.
    pub value: f64,
    /// The control direction `(σᵀ)⁻¹ θ̂` (certified to lie in the polar of
    /// the constraint cone).
    pub gradient_dir: DVector<f64>,
    pub kkt: KktReport,
}

/// Minimize `|θ + σ⁻¹ π̃|²` over `π̃ ∈ constraint`.
///
/// Solver choice by constraint family: a zero cone is trivial; the orthant
/// and generated cones reduce to nonnegative least squares in the coordinate
/// or generator weights; half-space intersections use projected gradient
/// descent with Dykstra projections.
pub fn solve_cone_qp(
    sigma: &DMatrix<f64>,
    theta: &DVector<f64>,
    constraint: &ConeSpec,
) -> Result<QpSolution, MarketError> {
    let n = theta.len();
    constraint.check_dimension(n)?;
    let lu = sigma.clone().lu();
    let sigma_inv = lu
        .try_inverse()
        .ok_or_else(|| MarketError::QpFailure("volatility not invertible".into()))?;

    let pi_tilde: DVector<f64> = match constraint {
        ConeSpec::FinitelyGenerated { generators } if generators.is_empty() => DVector::zeros(n),
        ConeSpec::FinitelyGenerated { generators } => {
            // π̃ = Gλ, λ ≥ 0: minimize |(σ⁻¹G)λ − (−θ)|².
            let a = &sigma_inv * columns_matrix(generators);
            let lambda = nnls(&a, &(-theta))?;
            columns_matrix(generators) * lambda
        }
        ConeSpec::NonnegOrthant => nnls(&sigma_inv, &(-theta))?,
        ConeSpec::WholeSpace => -(sigma * theta),
        ConeSpec::HalfSpaces { normals } => {
            // Projected gradient: f(x) = |θ + σ⁻¹x|², ∇f = 2σ⁻ᵀ(θ + σ⁻¹x).
            let svd = sigma_inv.clone().svd(false, false);
            let smax = svd.singular_values.max();
            let lipschitz = 2.0 * smax * smax;
            let step = 1.0 / lipschitz;
            let mut x = DVector::<f64>::zeros(n);
            let mut converged = false;
            for _ in 0..100_000 {
                let grad = sigma_inv.transpose() * (theta + &sigma_inv * &x) * 2.0;
                let candidate = &x - grad * step;
                let next = dykstra_project(&candidate, normals, 1e-12, 10_000)?;
                let shift = (&next - &x).amax();
                x = next;
                if shift <= 1e-13 * (1.0 + x.amax()) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(MarketError::QpFailure(
                    "projected gradient did not converge within the iteration cap".into(),
                ));
            }
            x
        }
    };

    let theta_hat = theta + &sigma_inv * &pi_tilde;
    let gradient_dir = sigma_inv.transpose() * &theta_hat;
    let dual = constraint.polar();
    let kkt = KktReport {
        gradient_membership: dual.membership_residual(&gradient_dir) / (1.0 + gradient_dir.norm()),
        complementarity: pi_tilde.dot(&gradient_dir).abs()
            / (1.0 + pi_tilde.norm() * gradient_dir.norm()),
    };
    Ok(QpSolution { pi_tilde, theta_hat: theta_hat.clone(), value: theta_hat.norm_squared(), gradient_dir, kkt })
}

/// Piecewise-constant market data on a time grid.
#[derive(Debug, Clone)]
pub struct MarketParams {
    n: usize,
    grid: Vec<f64>,
    b: Vec<DVector<f64>>,
    sigma: Vec<DMatrix<f64>>,
    cone: ConeSpec,
    theta_floor: f64,
}

impl MarketParams {
    /// `grid` runs `0 = t_0 < … < t_m = T`; `b[k]`, `sigma[k]` apply on
    /// `[t_k, t_{k+1})`. `theta_floor` is the required uniform lower bound on
    /// `|θ̂|`, enforced when the effective market is built.
    pub fn new(
        grid: Vec<f64>,
        b: Vec<DVector<f64>>,
        sigma: Vec<DMatrix<f64>>,
        cone: ConeSpec,
        theta_floor: f64,
    ) -> Result<Self, MarketError> {
        if grid.len() < 2 {
            return Err(MarketError::InvalidData("time grid needs at least two knots".into()));
        }
        if grid[0] != 0.0 {
            return Err(MarketError::InvalidData("time grid must start at 0".into()));
        }
        if !grid.windows(2).all(|w| w[1] > w[0] && w[1].is_finite()) {
            return Err(MarketError::InvalidData("time grid must be strictly increasing".into()));
        }
        let m = grid.len() - 1;
        if b.len() != m || sigma.len() != m {
            return Err(MarketError::InvalidData(format!(
                "expected {m} coefficient intervals, got {} drifts and {} volatilities",
                b.len(),
                sigma.len()
            )));
        }
        let n = b[0].len();
        if n == 0 {
            return Err(MarketError::InvalidData("need at least one asset".into()));
        }
        for (k, (bk, sk)) in b.iter().zip(&sigma).enumerate() {
            if bk.len() != n || sk.nrows() != n || sk.ncols() != n {
                return Err(MarketError::DimensionMismatch(format!(
                    "interval {k}: drift/volatility dimensions disagree with n = {n}"
                )));
            }
            if !bk.iter().all(|v| v.is_finite()) || !sk.iter().all(|v| v.is_finite()) {
                return Err(MarketError::InvalidData(format!(
                    "interval {k}: coefficients must be finite"
                )));
            }
        }
        if !(theta_floor > 0.0) || !theta_floor.is_finite() {
            return Err(MarketError::InvalidData(format!(
                "theta floor must be positive and finite, got {theta_floor}"
            )));
        }
        cone.check_dimension(n)?;
        Ok(MarketParams { n, grid, b, sigma, cone, theta_floor })
    }

    /// Single-interval market on `[0, horizon]`.
    pub fn constant(
        horizon: f64,
        b: DVector<f64>,
        sigma: DMatrix<f64>,
        cone: ConeSpec,
        theta_floor: f64,
    ) -> Result<Self, MarketError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(MarketError::InvalidData(format!("horizon must be positive, got {horizon}")));
        }
        MarketParams::new(vec![0.0, horizon], vec![b], vec![sigma], cone, theta_floor)
    }

    /// One-asset market with scalar drift and volatility.
    pub fn scalar(
        horizon: f64,
        b: f64,
        sigma: f64,
        cone: ConeSpec,
        theta_floor: f64,
    ) -> Result<Self, MarketError> {
        MarketParams::constant(
            horizon,
            DVector::from_vec(vec![b]),
            DMatrix::from_element(1, 1, sigma),
            cone,
            theta_floor,
        )
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn cone(&self) -> &ConeSpec {
        &self.cone
    }

    pub fn theta_floor(&self) -> f64 {
        self.theta_floor
    }

    pub fn drift(&self, k: usize) -> &DVector<f64> {
        &self.b[k]
    }

    pub fn volatility(&self, k: usize) -> &DMatrix<f64> {
        &self.sigma[k]
    }

    /// Interval index owning time `t` (last interval at `t = T`).
    pub fn interval_index(&self, t: f64) -> usize {
        let m = self.n_intervals();
        self.grid.partition_point(|&g| g <= t).clamp(1, m) - 1
    }

    /// Solve the cone least-squares problem on every interval and assemble
    /// the effective market. Fails if any volatility is singular, a solve
    /// does not certify optimality, or the floor `|θ̂| ≥ theta_floor` is
    /// violated (degenerate heat flow).
    pub fn effective(&self) -> Result<EffectiveMarket, MarketError> {
        let polar = self.cone.polar();
        let m = self.n_intervals();
        let mut theta = Vec::with_capacity(m);
        let mut solutions = Vec::with_capacity(m);
        let mut speed2_neg = Vec::with_capacity(m);
        for k in 0..m {
            let lu = self.sigma[k].clone().lu();
            let th = lu
                .solve(&self.b[k])
                .ok_or(MarketError::SingularVolatility(k))?;
            let sol = solve_cone_qp(&self.sigma[k], &th, &polar)?;
            if !sol.kkt.passed(1e-8) {
                return Err(MarketError::QpFailure(format!(
                    "interval {k}: KKT certificate failed (membership {:.2e}, complementarity {:.2e})",
                    sol.kkt.gradient_membership, sol.kkt.complementarity
                )));
            }
            let neg = solve_cone_qp(&self.sigma[k], &(-&th), &polar)?;
            speed2_neg.push(neg.value);
            theta.push(th);
            solutions.push(sol);
        }
        // Backward-cumulative half strain: τ(t_k) = ½ Σ_{j ≥ k} |θ̂_j|² Δt_j.
        let mut tau_knots = vec![0.0; m + 1];
        for k in (0..m).rev() {
            tau_knots[k] =
                tau_knots[k + 1] + 0.5 * solutions[k].value * (self.grid[k + 1] - self.grid[k]);
        }
        let min_speed = solutions
            .iter()
            .map(|s| s.value.sqrt())
            .fold(f64::INFINITY, f64::min);
        if min_speed < self.theta_floor - 1e-12 {
            return Err(MarketError::NotParabolic(format!(
                "min |θ̂| = {min_speed:.6e} falls below the floor {:.6e}",
                self.theta_floor
            )));
        }
        Ok(EffectiveMarket { params: self.clone(), theta, solutions, speed2_neg, tau_knots })
    }
}

/// The cone-projected market: per-interval effective price of risk, KKT
/// certificates, and the deterministic time change `τ`.
#[derive(Debug, Clone)]
pub struct EffectiveMarket {
    params: MarketParams,
    theta: Vec<DVector<f64>>,
    solutions: Vec<QpSolution>,
    /// `|θ̂|²` for the sign-flipped problem (drift `−b`), used by the
    /// Hamiltonian on the (never optimal) negative-marginal side.
    speed2_neg: Vec<f64>,
    /// `τ(t_k)` at the grid knots, descending to `τ(T) = 0`.
    tau_knots: Vec<f64>,
}

impl EffectiveMarket {
    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn horizon(&self) -> f64 {
        self.params.horizon()
    }

    /// Raw price of risk `θ = σ⁻¹ b` on interval `k`.
    pub fn theta(&self, k: usize) -> &DVector<f64> {
        &self.theta[k]
    }

    /// Dual-feasible shift `π̂` on interval `k`.
    pub fn pi_hat(&self, k: usize) -> &DVector<f64> {
        &self.solutions[k].pi_tilde
    }

    /// Effective price of risk `θ̂` on interval `k`.
    pub fn theta_hat(&self, k: usize) -> &DVector<f64> {
        &self.solutions[k].theta_hat
    }

    /// Control direction `(σᵀ)⁻¹ θ̂` on interval `k`; lies in the trading cone.
    pub fn control_direction(&self, k: usize) -> &DVector<f64> {
        &self.solutions[k].gradient_dir
    }

    pub fn kkt(&self, k: usize) -> &KktReport {
        &self.solutions[k].kkt
    }

    /// `|θ̂(t)|²`.
    pub fn speed2_at(&self, t: f64) -> f64 {
        self.solutions[self.params.interval_index(t)].value
    }

    /// `|θ̂|²` for the drift-flipped problem, by interval index.
    pub fn speed2_neg(&self, k: usize) -> f64 {
        self.speed2_neg[k]
    }

    pub fn theta_hat_at(&self, t: f64) -> &DVector<f64> {
        self.theta_hat(self.params.interval_index(t))
    }

    /// Remaining squared strain `τ(t) = ½ ∫_t^T |θ̂(s)|² ds` (piecewise linear,
    /// strictly decreasing to `τ(T) = 0`).
    pub fn tau(&self, t: f64) -> f64 {
        let k = self.params.interval_index(t);
        let dt = t - self.params.grid[k];
        (self.tau_knots[k] - 0.5 * self.solutions[k].value * dt).max(0.0)
    }

    /// `τ(0)`: the total squared strain over the horizon.
    pub fn total_tau(&self) -> f64 {
        self.tau_knots[0]
    }

    /// `∫_0^T |θ̂|² ds = 2 τ(0)`.
    pub fn total_strain(&self) -> f64 {
        2.0 * self.tau_knots[0]
    }

    pub fn min_speed(&self) -> f64 {
        self.solutions
            .iter()
            .map(|s| s.value.sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn mat2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    #[test]
    fn polar_is_involutive_on_all_families() {
        let cones = vec![
            ConeSpec::WholeSpace,
            ConeSpec::NonnegOrthant,
            ConeSpec::FinitelyGenerated { generators: vec![vec2(1.0, 0.0), vec2(1.0, 1.0)] },
            ConeSpec::HalfSpaces { normals: vec![vec2(0.0, 1.0)] },
        ];
        for k in cones {
            assert_eq!(k.polar().polar(), k);
        }
    }

    #[test]
    fn membership_residuals() {
        let orthant = ConeSpec::NonnegOrthant;
        assert_eq!(orthant.membership_residual(&vec2(1.0, 0.0)), 0.0);
        assert_relative_eq!(orthant.membership_residual(&vec2(1.0, -0.5)), 0.5);

        let fg = ConeSpec::FinitelyGenerated { generators: vec![vec2(1.0, 0.0), vec2(1.0, 1.0)] };
        assert!(fg.contains(&vec2(3.0, 1.0), 1e-10)); // 2·(1,0) + 1·(1,1)
        assert!(!fg.contains(&vec2(-1.0, 0.0), 1e-6));
        assert!(!fg.contains(&vec2(0.5, 1.0), 1e-6)); // above the (1,1) ray

        let zero = ConeSpec::FinitelyGenerated { generators: vec![] };
        assert!(zero.contains(&vec2(0.0, 0.0), 1e-12));
        assert!(!zero.contains(&vec2(1e-3, 0.0), 1e-6));
    }

    #[test]
    fn whole_space_cone_keeps_theta() {
        let sol = solve_cone_qp(
            &mat2(0.4, 0.0, 0.0, 0.3),
            &vec2(0.5, -0.2),
            &ConeSpec::WholeSpace.polar(),
        )
        .unwrap();
        assert_relative_eq!(sol.theta_hat[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(sol.theta_hat[1], -0.2, max_relative = 1e-12);
        assert_eq!(sol.pi_tilde.norm(), 0.0);
        assert!(sol.kkt.passed(1e-10));
    }

    #[test]
    fn orthant_cone_clips_negative_component() {
        // Long-only, σ = I: the polar is the orthant itself and the solve is a
        // coordinatewise clip of −θ.
        let sigma = DMatrix::<f64>::identity(2, 2);
        let theta = vec2(1.0, -2.0);
        let sol = solve_cone_qp(&sigma, &theta, &ConeSpec::NonnegOrthant.polar()).unwrap();
        assert_relative_eq!(sol.theta_hat[0], 1.0, max_relative = 1e-10);
        assert!(sol.theta_hat[1].abs() <= 1e-10);
        assert_relative_eq!(sol.pi_tilde[1], 2.0, max_relative = 1e-10);
        assert!(sol.kkt.passed(1e-8));
        assert_relative_eq!(sol.value, 1.0, max_relative = 1e-10);
    }

    /// Refining grid-search oracle over the generator weights of the
    /// constraint cone (two generators).
    fn grid_oracle_generated(
        sigma: &DMatrix<f64>,
        theta: &DVector<f64>,
        gens: &[DVector<f64>],
    ) -> f64 {
        let sigma_inv = sigma.clone().lu().try_inverse().unwrap();
        let f = |l0: f64, l1: f64| {
            let pi = &gens[0] * l0 + &gens[1] * l1;
            (theta + &sigma_inv * pi).norm_squared()
        };
        let (mut c0, mut c1, mut half) = (2.0, 2.0, 2.0);
        let mut best = f64::INFINITY;
        for _ in 0..40 {
            let (mut b0, mut b1) = (c0, c1);
            for i in 0..=40 {
                for j in 0..=40 {
                    let l0 = (c0 - half + 2.0 * half * i as f64 / 40.0).max(0.0);
                    let l1 = (c1 - half + 2.0 * half * j as f64 / 40.0).max(0.0);
                    let v = f(l0, l1);
                    if v < best {
                        best = v;
                        b0 = l0;
                        b1 = l1;
                    }
                }
            }
            c0 = b0;
            c1 = b1;
            half *= 0.35;
        }
        best
    }

    #[test]
    fn generated_cone_qp_matches_grid_oracle() {
        let sigma = mat2(0.3, 0.0, 0.1, 0.4);
        let theta = vec2(-0.8, 0.9);
        let gens = vec![vec2(1.0, 0.0), vec2(1.0, 1.0)];
        let constraint = ConeSpec::FinitelyGenerated { generators: gens.clone() };
        let sol = solve_cone_qp(&sigma, &theta, &constraint).unwrap();
        let oracle = grid_oracle_generated(&sigma, &theta, &gens);
        assert_relative_eq!(sol.value, oracle, max_relative = 1e-8, epsilon = 1e-10);
        assert!(sol.kkt.passed(1e-8));
        assert!(constraint.contains(&sol.pi_tilde, 1e-9));
    }

    #[test]
    fn halfspace_qp_agrees_with_orthant_nnls() {
        // The orthant written as half-spaces must give the same minimum as the
        // orthant NNLS path.
        let sigma = mat2(0.35, 0.05, 0.0, 0.25);
        let theta = vec2(0.7, -1.1);
        let as_orthant = solve_cone_qp(&sigma, &theta, &ConeSpec::NonnegOrthant).unwrap();
        let as_halfspaces = solve_cone_qp(
            &sigma,
            &theta,
            &ConeSpec::HalfSpaces { normals: vec![vec2(1.0, 0.0), vec2(0.0, 1.0)] },
        )
        .unwrap();
        assert_relative_eq!(as_orthant.value, as_halfspaces.value, max_relative = 1e-9);
        assert!(
            (&as_orthant.pi_tilde - &as_halfspaces.pi_tilde).norm() <= 1e-6,
            "minimizers disagree: {:?} vs {:?}",
            as_orthant.pi_tilde,
            as_halfspaces.pi_tilde
        );
        assert!(as_halfspaces.kkt.passed(1e-8));
    }

    #[test]
    fn halfspace_qp_single_constraint_closed_form() {
        // Constraint {x·(1,1) ≥ 0} with σ = I: minimizing |θ + x|² projects
        // −θ onto the half-space, so θ̂ is the reflection residual.
        let sigma = DMatrix::<f64>::identity(2, 2);
        let theta = vec2(1.0, 2.0);
        let sol = solve_cone_qp(
            &sigma,
            &theta,
            &ConeSpec::HalfSpaces { normals: vec![vec2(1.0, 1.0)] },
        )
        .unwrap();
        // −θ violates nothing: (−1) + (−2) = −3 < 0 violates; projection of −θ
        // onto the half-space: −θ + (3/2)(1,1)/1 → (0.5, −0.5); θ̂ = θ + π̂.
        assert_relative_eq!(sol.pi_tilde[0], 0.5, max_relative = 1e-8, epsilon = 1e-10);
        assert_relative_eq!(sol.pi_tilde[1], -0.5, max_relative = 1e-8, epsilon = 1e-10);
        assert_relative_eq!(sol.value, 4.5, max_relative = 1e-9);
        assert!(sol.kkt.passed(1e-8));
    }

    #[test]
    fn merton_effective_market() {
        let market = MarketParams::scalar(1.0, 0.2, 0.4, ConeSpec::WholeSpace, 0.1).unwrap();
        let eff = market.effective().unwrap();
        assert_relative_eq!(eff.theta_hat(0)[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(eff.speed2_at(0.3), 0.25, max_relative = 1e-12);
        assert_relative_eq!(eff.total_tau(), 0.125, max_relative = 1e-12);
        assert_relative_eq!(eff.tau(0.5), 0.0625, max_relative = 1e-12);
        assert_eq!(eff.tau(1.0), 0.0);
        // Control direction: (σᵀ)⁻¹ θ̂ = 0.5 / 0.4 = 1.25.
        assert_relative_eq!(eff.control_direction(0)[0], 1.25, max_relative = 1e-12);
    }

    #[test]
    fn piecewise_tau_is_backward_cumulative() {
        let market = MarketParams::new(
            vec![0.0, 0.5, 1.0],
            vec![DVector::from_vec(vec![0.2]), DVector::from_vec(vec![0.1])],
            vec![DMatrix::from_element(1, 1, 0.4), DMatrix::from_element(1, 1, 0.2)],
            ConeSpec::WholeSpace,
            0.2,
        )
        .unwrap();
        let eff = market.effective().unwrap();
        // Speeds: (0.5)² = 0.25 then (0.5)² = 0.25 — same speed, different data.
        assert_relative_eq!(eff.speed2_at(0.25), 0.25, max_relative = 1e-12);
        assert_relative_eq!(eff.speed2_at(0.75), 0.25, max_relative = 1e-12);
        assert_relative_eq!(eff.total_tau(), 0.125, max_relative = 1e-12);
        assert_relative_eq!(eff.tau(0.25), 0.125 - 0.5 * 0.25 * 0.25, max_relative = 1e-12);
        // Interval lookup: boundary times belong to the right interval,
        // horizon to the last.
        assert_eq!(market.interval_index(0.0), 0);
        assert_eq!(market.interval_index(0.5), 1);
        assert_eq!(market.interval_index(1.0), 1);
    }

    #[test]
    fn long_only_against_negative_drift_is_degenerate() {
        // θ < 0 with a long-only cone forces θ̂ = 0, violating the floor.
        let market = MarketParams::scalar(1.0, -0.2, 0.4, ConeSpec::NonnegOrthant, 0.1).unwrap();
        match market.effective() {
            Err(MarketError::NotParabolic(_)) => {}
            other => panic!("expected degeneracy error, got {other:?}"),
        }
    }

    #[test]
    fn drift_flip_speed_differs_under_constraints() {
        // Long-only, positive drift: the flipped problem (−θ) projects to 0.
        let market = MarketParams::scalar(1.0, 0.2, 0.4, ConeSpec::NonnegOrthant, 0.1).unwrap();
        let eff = market.effective().unwrap();
        assert_relative_eq!(eff.speed2_at(0.0), 0.25, max_relative = 1e-12);
        assert_relative_eq!(eff.speed2_neg(0), 0.0, epsilon = 1e-20);
        // Unconstrained: both signs give the same speed.
        let free = MarketParams::scalar(1.0, 0.2, 0.4, ConeSpec::WholeSpace, 0.1)
            .unwrap()
            .effective()
            .unwrap();
        assert_relative_eq!(free.speed2_neg(0), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn constrained_two_asset_effective_market_certifies_kkt() {
        // Generated cone (long first asset, optional hedge into the second).
        let cone = ConeSpec::FinitelyGenerated { generators: vec![vec2(1.0, 0.0), vec2(1.0, 1.0)] };
        let market = MarketParams::constant(
            2.0,
            vec2(0.10, -0.05),
            mat2(0.30, 0.00, 0.10, 0.40),
            cone.clone(),
            1e-3,
        )
        .unwrap();
        let eff = market.effective().unwrap();
        assert!(eff.kkt(0).passed(1e-8));
        // The control direction must lie in the trading cone.
        assert!(cone.contains(eff.control_direction(0), 1e-8));
        // π̂ lies in the polar (half-space form).
        assert!(cone.polar().contains(eff.pi_hat(0), 1e-8));
        assert!(eff.min_speed() >= 1e-3);
    }

    #[test]
    fn rejects_bad_grids_and_dimensions() {
        assert!(MarketParams::new(
            vec![0.5, 1.0],
            vec![DVector::from_vec(vec![0.1])],
            vec![DMatrix::from_element(1, 1, 0.2)],
            ConeSpec::WholeSpace,
            0.1
        )
        .is_err());
        assert!(MarketParams::scalar(1.0, 0.1, 0.2, ConeSpec::WholeSpace, 0.0).is_err());
        let bad_cone = ConeSpec::FinitelyGenerated { generators: vec![DVector::from_vec(vec![1.0, 0.0])] };
        assert!(MarketParams::scalar(1.0, 0.1, 0.2, bad_cone, 0.1).is_err());
    }
}
