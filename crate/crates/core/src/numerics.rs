//! Scalar root-bracketing helpers shared by the conjugate solver, crossover
//! validation, and the inverse marginal map.

/// Relative-width bisection for a continuous function with a sign change on
/// `[lo, hi]`. Returns the midpoint of the final bracket.
///
/// `f(lo)` and `f(hi)` must have opposite (non-strict) signs; the caller is
/// responsible for bracketing. Converges to relative width `rel_tol` or at
/// most `max_iter` halvings.
pub fn bisect<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    rel_tol: f64,
    max_iter: usize,
) -> f64 {
    debug_assert!(lo <= hi);
    let mut flo = f(lo);
    if flo == 0.0 {
        return lo;
    }
    let fhi = f(hi);
    if fhi == 0.0 {
        return hi;
    }
    debug_assert!(
        flo.signum() != fhi.signum(),
        "bisect requires a sign change: f({lo})={flo}, f({hi})={fhi}"
    );
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= rel_tol * (1.0 + mid.abs()) {
            return mid;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `n` geometrically spaced points from `lo` to `hi` inclusive (both > 0).
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2, "logspace needs 0 < lo < hi and n >= 2");
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            (a + t * (b - a)).exp()
        })
        .collect()
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs n >= 2");
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            lo + t * (hi - lo)
        })
        .collect()
}

/// Maximum of a scalar function over `[lo, hi]` (both > 0): a log-spaced
/// scan of `n` points followed by golden-section refinement inside the
/// bracketing pair of grid cells. Returns `(argmax, max)`.
///
/// Exact for unimodal functions; for multimodal ones it refines the best
/// scanned cell, so `n` must resolve the global structure.
pub fn log_grid_max<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    n: usize,
    refine: usize,
) -> (f64, f64) {
    assert!(lo > 0.0 && hi > lo && n >= 3, "log_grid_max needs 0 < lo < hi and n >= 3");
    let grid = logspace(lo, hi, n);
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &x) in grid.iter().enumerate() {
        let v = f(x);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let mut a = grid[best.saturating_sub(1)].ln();
    let mut b = grid[(best + 1).min(n - 1)].ln();
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c.exp());
    let mut fd = f(d.exp());
    for _ in 0..refine {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d.exp());
        }
    }
    let xm = (0.5 * (a + b)).exp();
    let vm = f(xm);
    if vm > best_v {
        (xm, vm)
    } else {
        (grid[best], best_v)
    }
}

/// Sample mean and standard error (ddof = 1). Returns `(mean, se)`.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    assert!(n >= 2, "need at least two samples");
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_finds_square_root() {
        let root = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14, 200);
        assert!((root - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn logspace_endpoints_exact_enough() {
        let g = logspace(1e-2, 1e2, 5);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 1e-2).abs() < 1e-15);
        assert!((g[4] - 1e2).abs() < 1e-12);
        assert!((g[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_grid_max_refines_legendre_scan() {
        // sup_x (√x − x·y) = 1/(4y) at x = 1/(4y²); y = 1/2 gives (1, 1/2).
        let (x, v) = log_grid_max(|x| x.sqrt() - 0.5 * x, 1e-6, 1e6, 601, 80);
        assert!((x - 1.0).abs() < 1e-8, "argmax {x}");
        assert!((v - 0.5).abs() < 1e-12, "max {v}");
        // Same objective at a tiny scale: y = 2.5e8 gives argmax 4e-18.
        let y = 2.5e8;
        let (x, v) = log_grid_max(|x| x.sqrt() - y * x, 1e-300, 1.0, 2001, 80);
        assert!((x - 4e-18).abs() < 1e-24, "argmax {x}");
        assert!((v - 1.0 / (4.0 * y)).abs() < 1e-18, "max {v}");
    }

    #[test]
    fn mean_and_se_matches_hand_computation() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((se - (5.0_f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
