//! Smooth value surfaces and optimal feedback controls for cone-constrained
//! portfolio choice with nonsmooth concave utilities.
//!
//! The terminal reward `U` may have kinks and flat marginal segments, and the
//! admissible portfolio weights are confined to a closed convex cone `K`.
//! Instead of attacking the (fully nonlinear, possibly degenerate) primal
//! Hamilton–Jacobi–Bellman equation directly, everything here runs through
//! convex duality:
//!
//! ```text
//! utility U ──(Legendre conjugate)──► dual utility Ũ
//!     Ũ ──(lognormal heat kernel in the dual clock τ)──► dual surface V̂(t,y)
//!     V̂ ──(Legendre transform back)──► primal surface u(t,x), feedback π*(t,x)
//! ```
//!
//! The dual linearizes: `V̂_t + ½|θ̂(t)|² y² V̂_yy = 0`, where `θ̂` is the
//! effective market price of risk after projecting onto the polar cone of `K`.
//! Because the dual terminal datum Ũ is convex and the kernel is strictly
//! smoothing, `V̂(t,·)` is strictly convex for `t < T`, the Legendre transform
//! back is exact, and the recovered `u(t,·)` is strictly concave and smooth even
//! when `U` is kinked. The feedback control comes out in closed form from the
//! dual derivatives and a single cone-constrained least-squares projection.
//!
//! Module map:
//! - [`utility`]: utility families, subdifferentials, admissibility validation,
//!   Legendre conjugates with piecewise closed forms.
//! - [`market`]: piecewise-constant market coefficients, convex cones, polar
//!   cones, the cone-constrained projection QP, and the dual clock τ.
//! - [`dual`]: the dual value surface V̂ and its derivatives by kink-aligned
//!   Gauss-kernel quadrature, plus the inverse marginal map.
//! - [`primal`]: the primal surface u, feedback controls, Hamiltonian,
//!   finite-difference HJB residuals, and tabulated controls for simulation.
//! - [`sim`]: reproducible Monte Carlo for the wealth and dual processes,
//!   value verification and duality-pairing checks.
//! - [`apps`]: CVaR-constrained frontiers via utility reshaping, and
//!   risk-aversion monotonicity reports.

pub mod diagnostics;
pub mod dual;
pub mod market;
pub mod apps;
pub mod numerics;
pub mod primal;
pub mod sim;
pub mod utility;

pub use diagnostics::{CheckReport, CheckResult};
pub use dual::{DualSurface, QuadratureConfig};
pub use market::{ConeSpec, EffectiveMarket, MarketParams};
pub use apps::{CvarSpec, FrontierPoint};
pub use primal::{ControlTable, PrimalSurface};
pub use sim::{ControlSpec, PathBatchResult, SimConfig};
pub use utility::{DualUtility, GrowthBound, UtilityFunction};
