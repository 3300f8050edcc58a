//! Sampling of nonnegative unit target objectives whose Hoyer sparseness is
//! uniformly distributed on [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::FeatureObjective;
use crate::tensor::norm;

/// Accepted deviation `|hoyer(x) - s|`.
pub const SPARSENESS_TOLERANCE: f64 = 0.01;
const INNER_TOLERANCE: f64 = 1e-3;
const MAX_ITERATIONS: usize = 10_000;
const MAX_RESAMPLES: usize = 100;

/// `(√n - ‖x‖₁/‖x‖₂) / (√n - 1)` for a nonzero, nonnegative `x`, `n ≥ 2`.
pub fn hoyer(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument("hoyer sparseness needs at least two entries".into()));
    }
    if x.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("hoyer sparseness needs nonnegative entries".into()));
    }
    let max = x.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument("hoyer sparseness of the zero vector".into()));
    }
    // scaling by the largest entry makes e_i and constant vectors exact
    let l1: f64 = x.iter().map(|v| v / max).sum();
    let l2sq: f64 = x.iter().map(|v| (v / max) * (v / max)).sum();
    let sqrt_n = (n as f64).sqrt();
    let ratio = (l1 * l1 / l2sq).sqrt();
    Ok(((sqrt_n - ratio) / (sqrt_n - 1.0)).clamp(0.0, 1.0))
}

fn hoyer_grad(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let l1: f64 = x.iter().sum();
    let l2 = norm(x);
    let denom = n.sqrt() - 1.0;
    x.iter().map(|v| -(1.0 / l2 - l1 * v / (l2 * l2 * l2)) / denom).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsenessFit {
    pub x: Vec<f64>,
    pub target: f64,
    pub hoyer: f64,
    pub iterations: usize,
}

/// Projected Riemannian gradient descent on `(hoyer(x) - s)²` over the
/// nonnegative part of the unit sphere, with step halving on rejection.
///
/// Returns the best point found within the iteration cap.
pub fn fit_sparseness(x0: &[f64], s: f64) -> Result<SparsenessFit> {
    let mut x: Vec<f64> = x0.iter().map(|v| v.max(0.0)).collect();
    let n0 = norm(&x);
    if !(n0 > 0.0) {
        return Err(Error::InvalidArgument("sparseness fit needs a nonzero start".into()));
    }
    x.iter_mut().for_each(|v| *v /= n0);
    let mut h = hoyer(&x)?;
    let mut step = 1.0;
    let mut iterations = 0;
    while (h - s).abs() >= INNER_TOLERANCE && iterations < MAX_ITERATIONS {
        iterations += 1;
        let g: Vec<f64> = hoyer_grad(&x).into_iter().map(|v| 2.0 * (h - s) * v).collect();
        let radial: f64 = g.iter().zip(&x).map(|(a, b)| a * b).sum();
        let mut cand: Vec<f64> = x
            .iter()
            .zip(&g)
            .map(|(xi, gi)| (xi - step * (gi - radial * xi)).max(0.0))
            .collect();
        let cn = norm(&cand);
        if cn > 0.0 {
            cand.iter_mut().for_each(|v| *v /= cn);
            let hc = hoyer(&cand)?;
            if (hc - s).abs() < (h - s).abs() {
                x = cand;
                h = hc;
                step *= 1.5;
                continue;
            }
        }
        step *= 0.5;
        if step < 1e-300 {
            break;
        }
    }
    Ok(SparsenessFit {
        x,
        target: s,
        hoyer: h,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledObjective {
    pub x: FeatureObjective,
    pub target_sparseness: f64,
    pub sparseness: f64,
    /// Targets `s` drawn, including the accepted one.
    pub draws: usize,
}

/// Draws `s ~ U[0, 1]` and a start uniform on the nonnegative orthant of
/// the sphere, then fits the start to sparseness `s`. A fit that misses by
/// [`SPARSENESS_TOLERANCE`] or more is discarded and `s` redrawn.
pub fn sample_objective<R: Rng + ?Sized>(n_f: usize, rng: &mut R) -> Result<SampledObjective> {
    if n_f < 2 {
        return Err(Error::InvalidArgument("objective sampling needs n_f >= 2".into()));
    }
    for draw in 1..=MAX_RESAMPLES {
        let s: f64 = rng.random();
        let x0: Vec<f64> = (0..n_f)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g.abs()
            })
            .collect();
        if !(norm(&x0) > 0.0) {
            continue;
        }
        let fit = fit_sparseness(&x0, s)?;
        if (fit.hoyer - s).abs() < SPARSENESS_TOLERANCE {
            return Ok(SampledObjective {
                x: FeatureObjective::normalized(fit.x)?,
                target_sparseness: s,
                sparseness: fit.hoyer,
                draws: draw,
            });
        }
        log::info!("sparseness fit missed s = {s:.4} (reached {:.4}); redrawing", fit.hoyer);
    }
    Err(Error::NoConvergence {
        algorithm: "sparseness sampling",
        iterations: MAX_RESAMPLES,
    })
}

/// [`sample_objective`] with a dedicated generator seeded by `seed`.
pub fn sample_objective_seeded(n_f: usize, seed: u64) -> Result<SampledObjective> {
    sample_objective(n_f, &mut ChaCha8Rng::seed_from_u64(seed))
}
