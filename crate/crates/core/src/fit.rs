//! Scaling-law surface fits and log-log slopes.

use std::cell::Cell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const DEFAULT_HUBER_DELTA: f64 = 1e-3;
const FTOL: f64 = 1e-10;
const MAX_EVALS: usize = 10_000;

/// One aggregated cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub m: f64,
    pub n: f64,
    pub risk: f64,
}

impl FitPoint {
    pub fn new(m: f64, n: f64, risk: f64) -> Self {
        FitPoint { m, n, risk }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Fixed(f64),
    Free,
}

/// `Risk ≈ σ² + c1 M^{-a1} + c2 N^{-a2}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub c1: f64,
    pub a1: f64,
    pub c2: f64,
    pub a2: f64,
    pub sigma2: f64,
    pub sigma2_fitted: bool,
    pub loss: f64,
    pub delta: f64,
    /// Largest `|log R̂ − log R(θ)|` over the points.
    pub max_abs_residual: f64,
    pub n_points: usize,
    pub converged: bool,
    pub excluded_diverged: usize,
}

impl FitResult {
    pub fn predict(&self, m: f64, n: f64) -> f64 {
        self.sigma2 + self.c1 * m.powf(-self.a1) + self.c2 * n.powf(-self.a2)
    }

    pub fn with_excluded(mut self, excluded: usize) -> Self {
        self.excluded_diverged = excluded;
        self
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder-Mead on an unconstrained objective.
///
/// Stops when the spread of objective values over the simplex is within
/// `ftol` (relative to the best value), or when the simplex has collapsed to
/// round-off. The search is restarted around the best vertex after each stop
/// until a restart makes no progress.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: f64, ftol: f64, max_evals: usize) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let evals = Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let dim = x0.len();
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0);
    let mut converged = false;

    loop {
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        simplex.push((best_x.clone(), best_f));
        for i in 0..dim {
            let mut x = best_x.clone();
            x[i] += if x[i].abs() > 1e-3 { step * x[i].abs().max(1.0) } else { step };
            let v = eval(&x);
            simplex.push((x, v));
        }
        let start_f = best_f;
        let mut local_done = false;
        while evals.get() < max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let lo = simplex[0].1;
            let hi = simplex[dim].1;
            let spread = (hi - lo).abs();
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if (hi.is_finite() && spread <= ftol * lo.abs()) || diameter <= 1e-13 {
                local_done = true;
                break;
            }

            let mut centroid = vec![0.0; dim];
            for (x, _) in &simplex[..dim] {
                for (c, xi) in centroid.iter_mut().zip(x) {
                    *c += xi / dim as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[dim].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };
            let xr = along(-1.0);
            let fr = eval(&xr);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = eval(&xe);
                simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[dim - 1].1 {
                simplex[dim] = (xr, fr);
            } else {
                let t = if fr < simplex[dim].1 { -0.5 } else { 0.5 };
                let xc = along(t);
                let fc = eval(&xc);
                if fc < fr.min(simplex[dim].1) {
                    simplex[dim] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for (x, v) in simplex.iter_mut().skip(1) {
                        for (xi, bi) in x.iter_mut().zip(&x_best) {
                            *xi = bi + 0.5 * (*xi - bi);
                        }
                        *v = eval(x);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 <= best_f {
            best_x = simplex[0].0.clone();
            best_f = simplex[0].1;
        }
        if !local_done {
            break;
        }
        let improvement = start_f - best_f;
        if !(improvement > ftol * best_f.abs()) || improvement == 0.0 {
            converged = best_f.is_finite();
            break;
        }
    }
    Minimum {
        x: best_x,
        f: best_f,
        evals: evals.get(),
        converged,
    }
}

struct Surface<'a> {
    points: &'a [FitPoint],
    log_risk: Vec<f64>,
    noise: NoiseLevel,
    delta: f64,
}

impl Surface<'_> {
    /// θ = (log c1, a1, log c2, a2[, log σ²])
    fn unpack(&self, theta: &[f64]) -> (f64, f64, f64, f64, f64) {
        let sigma2 = match self.noise {
            NoiseLevel::Fixed(s) => s,
            NoiseLevel::Free => theta[4].exp(),
        };
        (theta[0].exp(), theta[1], theta[2].exp(), theta[3], sigma2)
    }

    fn residuals(&self, theta: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let (c1, a1, c2, a2, sigma2) = self.unpack(theta);
        self.points.iter().zip(&self.log_risk).map(move |(p, lr)| {
            lr - (sigma2 + c1 * p.m.powf(-a1) + c2 * p.n.powf(-a2)).ln()
        })
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        if theta[1] < 0.0 || theta[3] < 0.0 {
            return f64::INFINITY;
        }
        self.residuals(theta).map(|r| huber(r, self.delta)).sum()
    }
}

/// Fits `log R̂ ≈ log(σ² + c1 M^{-a1} + c2 N^{-a2})` under a Huber loss.
///
/// Multi-start simplex search from every `(a1, a2)` in `{0.25, 0.5, …, 2}²`.
/// `delta = ∞` gives plain least squares.
pub fn chinchilla_fit(points: &[FitPoint], noise: NoiseLevel, delta: f64) -> Result<FitResult> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("Huber δ must be > 0, got {delta}")));
    }
    let mut cells: Vec<(u64, u64)> = points.iter().map(|p| (p.m.to_bits(), p.n.to_bits())).collect();
    cells.sort_unstable();
    cells.dedup();
    if cells.len() < 6 {
        return Err(Error::InvalidParameter(format!(
            "need at least 6 distinct (M, N) points, got {}",
            cells.len()
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if !(p.m > 0.0 && p.n > 0.0) || !p.risk.is_finite() {
            return Err(Error::InvalidParameter(format!("bad fit point {i}: {p:?}")));
        }
        let floor = match noise {
            NoiseLevel::Fixed(s) => s,
            NoiseLevel::Free => 0.0,
        };
        if p.risk <= floor {
            return Err(Error::NonPositiveExcess {
                index: i,
                x: p.m,
                risk: p.risk,
                sigma2: floor,
            });
        }
    }
    if let NoiseLevel::Fixed(s) = noise {
        if !(s >= 0.0) {
            return Err(Error::InvalidParameter(format!("σ² must be ≥ 0, got {s}")));
        }
    }

    let surface = Surface {
        points,
        log_risk: points.iter().map(|p| p.risk.ln()).collect(),
        noise,
        delta,
    };
    let min_risk = points.iter().map(|p| p.risk).fold(f64::INFINITY, f64::min);
    let grid: Vec<f64> = (1..=8).map(|k| 0.25 * k as f64).collect();
    let starts: Vec<Vec<f64>> = grid
        .iter()
        .flat_map(|&a1| grid.iter().map(move |&a2| (a1, a2)))
        .map(|(a1, a2)| {
            let mut theta = vec![0.0, a1, 0.0, a2];
            if noise == NoiseLevel::Free {
                theta.push((0.5 * min_risk).ln());
            }
            theta
        })
        .collect();

    let results: Vec<Minimum> = starts
        .par_iter()
        .map(|x0| nelder_mead(|t| surface.loss(t), x0, 0.1, FTOL, MAX_EVALS))
        .collect();
    let best = results
        .iter()
        .filter(|r| r.converged)
        .min_by(|a, b| a.f.total_cmp(&b.f));
    let Some(best) = best else {
        let fallback = results
            .iter()
            .min_by(|a, b| a.f.total_cmp(&b.f))
            .expect("at least one start");
        return Err(Error::FitNotConverged {
            params: fallback.x.clone(),
            loss: fallback.f,
        });
    };

    let (c1, a1, c2, a2, sigma2) = surface.unpack(&best.x);
    let max_abs_residual = surface.residuals(&best.x).map(f64::abs).fold(0.0, f64::max);
    log::debug!(
        "fit: {} of {} starts converged, loss {:e}",
        results.iter().filter(|r| r.converged).count(),
        results.len(),
        best.f
    );
    Ok(FitResult {
        c1,
        a1,
        c2,
        a2,
        sigma2,
        sigma2_fitted: noise == NoiseLevel::Free,
        loss: best.f,
        delta,
        max_abs_residual,
        n_points: points.len(),
        converged: true,
        excluded_diverged: 0,
    })
}

/// Slope of `log2(R̂ − σ²)` against `log2 x`, with its OLS standard error.
///
/// Two points give the finite difference and an infinite standard error.
pub fn loglog_slope(points: &[(f64, f64)], sigma2: f64) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 points for a slope, got {}",
            points.len()
        )));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for (i, &(x, risk)) in points.iter().enumerate() {
        if !(risk > sigma2) {
            return Err(Error::NonPositiveExcess {
                index: i,
                x,
                risk,
                sigma2,
            });
        }
        if !(x > 0.0) {
            return Err(Error::InvalidParameter(format!("x must be > 0, got {x} at point {i}")));
        }
        xs.push(x.log2());
        ys.push((risk - sigma2).log2());
    }
    let line = stats::ols(&xs, &ys);
    if !line.slope.is_finite() {
        return Err(Error::InvalidParameter("all x values coincide".into()));
    }
    Ok((line.slope, line.slope_stderr))
}
