//! The clipped gradient is still the exact gradient of some f-divergence.
//!
//! An f-divergence `D_f(p||q) = E_q[f(p/q) − f(1)]` has logit-space gradient
//! `−E_q[ρ_f(p/q) ∇log q]` with `ρ_f(t) = f'(t)t − f(t)`. Matching the clipped
//! estimator requires `ρ_f = ρ*`, `ρ*(t) = (1/α)·min(t^α, β)`, so
//! `f''(t) = ρ*'(t)/t`. That `f` is convex exactly when `ρ*` is non-decreasing.
//!
//! [`verify_f_divergence`] checks all of this numerically on a grid.

use super::{DivergenceError, ProbDist, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(1/α)·min(t^α, β)`.
pub fn rho_star(t: f64, alpha: f64, beta: f64) -> Result<f64> {
    if t.is_nan() || t <= 0.0 {
        return Err(DivergenceError::NonPositiveRatio(t));
    }
    if alpha == 0.0 {
        return Err(DivergenceError::ZeroAlpha);
    }
    if beta.is_nan() || beta < 1.0 {
        return Err(DivergenceError::InvalidClip(beta));
    }
    Ok(t.powf(alpha).min(beta) / alpha)
}

/// Piecewise-linear `f` on a grid, extended linearly past both ends.
///
/// Only defined up to `a + b·t`, which leaves every f-divergence unchanged.
#[derive(Debug, Clone)]
pub struct ReconstructedF {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
}

impl ReconstructedF {
    /// Integrate `f'' = ρ*'/t` twice along `grid`, starting from `f = f' = 0`.
    fn integrate(grid: &[f64], rho: &[f64]) -> Self {
        let n = grid.len();
        let mut derivatives = vec![0.0; n];
        let mut values = vec![0.0; n];
        for k in 1..n {
            let (a, b) = (grid[k - 1], grid[k]);
            // ∫ dρ/t as a Stieltjes sum, with t at the geometric midpoint.
            derivatives[k] = derivatives[k - 1] + (rho[k] - rho[k - 1]) / (a * b).sqrt();
            values[k] = values[k - 1] + 0.5 * (b - a) * (derivatives[k - 1] + derivatives[k]);
        }
        Self { grid: grid.to_vec(), values, derivatives }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let g = &self.grid;
        let n = g.len();
        if n == 1 {
            return self.values[0];
        }
        let seg = match g.partition_point(|&x| x <= t) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let slope = (self.values[seg + 1] - self.values[seg]) / (g[seg + 1] - g[seg]);
        self.values[seg] + slope * (t - g[seg])
    }

    /// `Σ qᵢ [f(pᵢ/qᵢ) − f(1)]`; classes with `qᵢ = 0` are skipped.
    pub fn divergence(&self, p: &ProbDist, q: &ProbDist) -> f64 {
        let f1 = self.eval(1.0);
        p.probs()
            .iter()
            .zip(q.probs())
            .filter(|(_, &qi)| qi > 0.0)
            .map(|(&pi, &qi)| qi * (self.eval(pi / qi) - f1))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct FDivergenceReport {
    pub alpha: f64,
    pub beta: f64,
    /// Grid indices `k` where `ρ*(t_k) < ρ*(t_{k−1})`.
    pub rho_violations: Vec<usize>,
    /// Grid indices `k` where the secant slope of `f` decreases going into segment `k`.
    pub convexity_violations: Vec<usize>,
    pub samples: usize,
    pub min_sampled_divergence: f64,
    /// Sampled pairs whose divergence fell below `NEGATIVE_TOLERANCE`.
    pub negative_divergences: usize,
    pub f: ReconstructedF,
}

impl FDivergenceReport {
    pub const NEGATIVE_TOLERANCE: f64 = -1e-8;

    pub fn rho_monotone(&self) -> bool {
        self.rho_violations.is_empty()
    }

    pub fn f_convex(&self) -> bool {
        self.convexity_violations.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.rho_monotone() && self.f_convex() && self.negative_divergences == 0
    }
}

/// [`verify_f_divergence_with`] using 1000 sampled pairs and a fixed seed.
pub fn verify_f_divergence(alpha: f64, beta: f64, grid: &[f64]) -> Result<FDivergenceReport> {
    verify_f_divergence_with(alpha, beta, grid, 1000, 0x5eed)
}

/// Check that `ρ*` is monotone on `grid`, rebuild `f` from it, test `f`'s
/// convexity and the sign of `D_f` on `samples` random pairs.
pub fn verify_f_divergence_with(
    alpha: f64,
    beta: f64,
    grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<FDivergenceReport> {
    if grid.is_empty() {
        return Err(DivergenceError::Empty);
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DivergenceError::InvalidSpec("grid must be strictly increasing".into()));
    }
    let rho = grid
        .iter()
        .map(|&t| rho_star(t, alpha, beta))
        .collect::<Result<Vec<_>>>()?;

    let rho_violations = (1..rho.len()).filter(|&k| rho[k] < rho[k - 1]).collect();

    let f = ReconstructedF::integrate(grid, &rho);
    let slopes: Vec<f64> = (1..grid.len())
        .map(|k| (f.values[k] - f.values[k - 1]) / (grid[k] - grid[k - 1]))
        .collect();
    let convexity_violations = (1..slopes.len())
        .filter(|&k| {
            let tol = 1e-12 * (1.0 + slopes[k].abs().max(slopes[k - 1].abs()));
            slopes[k] < slopes[k - 1] - tol
        })
        .map(|k| k + 1)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_sampled_divergence = f64::INFINITY;
    let mut negative_divergences = 0;
    for _ in 0..samples {
        let m = rng.random_range(2..=10);
        let p = sample_dist(&mut rng, m);
        let q = sample_dist(&mut rng, m);
        let d = f.divergence(&p, &q);
        min_sampled_divergence = min_sampled_divergence.min(d);
        if d < FDivergenceReport::NEGATIVE_TOLERANCE {
            negative_divergences += 1;
        }
    }

    Ok(FDivergenceReport {
        alpha,
        beta,
        rho_violations,
        convexity_violations,
        samples,
        min_sampled_divergence,
        negative_divergences,
        f,
    })
}

fn sample_dist(rng: &mut ChaCha8Rng, m: usize) -> ProbDist {
    // Entries bounded away from zero keep every ratio inside a [1e-4, 1e4] grid.
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    ProbDist(raw.into_iter().map(|v| v / s).collect())
}

/// `n` points evenly spaced in log between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}
