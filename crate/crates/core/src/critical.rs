//! Estimation of the critical space: the orthogonal complement of the
//! common approximate co-kernel of a set of Jacobians.
//!
//! Each Jacobian contributes the span of its left-singular vectors whose
//! singular values fall below `rho·σ_max`. Those subspaces are merged two
//! at a time, left to right: principal pairs at 45° or more are dropped and
//! the rest are interpolated on the sphere with weight proportional to the
//! number of subspaces already merged on each side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{left_singular_full, qr, svd, Matrix};
use crate::network::JacobianMatrix;
use crate::solver::SubspaceBasis;
use crate::tensor::{dot, norm};

/// Principal pairs at or above this angle are dropped when merging.
pub const MERGE_CUTOFF_DEG: f64 = 45.0;

/// Jacobians used by the scan when the caller does not say otherwise.
pub const DEFAULT_SAMPLE_COUNT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalSpaceConfig {
    /// Relative singular-value threshold in (0, 1).
    pub rho: f64,
    /// Number of leading Jacobians consumed.
    pub sample_count: usize,
}

impl CriticalSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("critical space needs at least one sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cokernel {
    pub basis: SubspaceBasis,
    /// The Jacobian was zero, so the whole space was returned.
    pub degenerate: bool,
}

/// Left-singular basis of one Jacobian, reusable across thresholds.
#[derive(Debug, Clone)]
pub struct SingularBasis {
    u: Matrix,
    /// Singular values divided by the largest one, descending.
    ratios: Vec<f64>,
    zero: bool,
}

impl SingularBasis {
    pub fn new(jac: &JacobianMatrix) -> Result<Self> {
        let (u, s) = left_singular_full(jac.matrix())?;
        let top = s.first().copied().unwrap_or(0.0);
        let zero = !(top > 0.0);
        let ratios = if zero { vec![0.0; s.len()] } else { s.iter().map(|v| v / top).collect() };
        Ok(Self { u, ratios, zero })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// Span of left-singular vectors with `σ_j < rho·σ_max`.
    pub fn cokernel(&self, rho: f64) -> Cokernel {
        let n = self.u.rows();
        if self.zero {
            return Cokernel {
                basis: SubspaceBasis::full(n),
                degenerate: true,
            };
        }
        let cols: Vec<Vec<f64>> = (0..n).filter(|&j| self.ratios[j] < rho).map(|j| self.u.column(j)).collect();
        let basis = SubspaceBasis::new(Matrix::from_columns(n, &cols)).expect("singular vectors are orthonormal");
        Cokernel {
            basis,
            degenerate: false,
        }
    }
}

pub fn approx_cokernel(jac: &JacobianMatrix, rho: f64) -> Result<Cokernel> {
    Ok(SingularBasis::new(jac)?.cokernel(rho))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalAngles {
    /// Ascending, in degrees.
    pub angles: Vec<f64>,
    /// Column `j` pairs with column `j` of `right`.
    pub left: Matrix,
    pub right: Matrix,
}

/// Principal angles and vectors between two subspaces.
///
/// Cosines come from the SVD of `AᵀB`; each angle is then taken as
/// `atan2(‖v - AAᵀv‖, cos)` for its right vector `v`, which keeps small
/// angles accurate.
pub fn principal_angles(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<PrincipalAngles> {
    let n = a.ambient_dim();
    if b.ambient_dim() != n {
        return Err(Error::shape("principal angles", &[n], &[b.ambient_dim()]));
    }
    if a.dim() == 0 || b.dim() == 0 {
        return Ok(PrincipalAngles {
            angles: Vec::new(),
            left: Matrix::zeros(n, 0),
            right: Matrix::zeros(n, 0),
        });
    }
    let (qa, qb) = (a.basis(), b.basis());
    let r = svd(&qa.transpose().matmul(qb)?)?;
    let count = r.s.len();
    let left = qa.matmul(&r.u.take_columns(count))?;
    let right = qb.matmul(&r.vt.transpose().take_columns(count))?;
    let angles = (0..count)
        .map(|j| {
            let v = right.column(j);
            let residual: Vec<f64> = v.iter().zip(a.project(&v)).map(|(x, p)| x - p).collect();
            norm(&residual).atan2(r.s[j].min(1.0)).to_degrees()
        })
        .collect();
    Ok(PrincipalAngles { angles, left, right })
}

/// Spherical interpolation from `v0` (`t = 0`) to `v1` (`t = 1`).
///
/// `v1` is negated first when `v0ᵀv1 < 0`, so the shorter arc between the
/// two lines is used.
pub fn slerp(v0: &[f64], v1: &[f64], t: f64) -> Vec<f64> {
    let sign = if dot(v0, v1) < 0.0 { -1.0 } else { 1.0 };
    let v1: Vec<f64> = v1.iter().map(|v| sign * v).collect();
    let diff: Vec<f64> = v0.iter().zip(&v1).map(|(a, b)| a - b).collect();
    let sum: Vec<f64> = v0.iter().zip(&v1).map(|(a, b)| a + b).collect();
    let omega = 2.0 * norm(&diff).atan2(norm(&sum));
    let out: Vec<f64> = if omega < 1e-12 {
        v0.iter().zip(&v1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    } else {
        let s = omega.sin();
        let (w0, w1) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
        v0.iter().zip(&v1).map(|(a, b)| w0 * a + w1 * b).collect()
    };
    let n = norm(&out);
    out.into_iter().map(|v| v / n).collect()
}

/// Running result of the merge fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeState {
    pub basis: SubspaceBasis,
    /// Number of subspaces merged into `basis`.
    pub weight: usize,
}

impl MergeState {
    pub fn new(basis: SubspaceBasis) -> Self {
        Self { basis, weight: 1 }
    }
}

pub fn merge(a: &MergeState, b: &MergeState) -> Result<MergeState> {
    let n = a.basis.ambient_dim();
    let weight = a.weight + b.weight;
    let t = b.weight as f64 / weight as f64;
    let pa = principal_angles(&a.basis, &b.basis)?;
    let vectors: Vec<Vec<f64>> = pa
        .angles
        .iter()
        .enumerate()
        .filter(|(_, angle)| **angle < MERGE_CUTOFF_DEG)
        .map(|(j, _)| slerp(&pa.left.column(j), &pa.right.column(j), t))
        .collect();
    let basis = if vectors.is_empty() {
        SubspaceBasis::empty(n)
    } else {
        SubspaceBasis::new(qr(&Matrix::from_columns(n, &vectors)).0)?
    };
    Ok(MergeState { basis, weight })
}

/// Left fold of [`merge`] over the co-kernels of `bases` at `rho`.
fn fold_cokernels(bases: &[SingularBasis], rho: f64) -> Result<MergeState> {
    let mut iter = bases.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("critical space needs at least one jacobian".into()))?;
    let mut state = MergeState::new(first.cokernel(rho).basis);
    for b in iter {
        state = merge(&state, &MergeState::new(b.cokernel(rho).basis))?;
    }
    Ok(state)
}

fn singular_bases(jacs: &[JacobianMatrix]) -> Result<Vec<SingularBasis>> {
    if jacs.is_empty() {
        return Err(Error::InvalidArgument("critical space needs at least one jacobian".into()));
    }
    let n = jacs[0].n_features();
    if let Some(bad) = jacs.iter().find(|j| j.n_features() != n) {
        return Err(Error::shape("jacobian rows", &[n], &[bad.n_features()]));
    }
    jacs.par_iter().map(SingularBasis::new).collect()
}

/// Merged common co-kernel of `jacs` at threshold `rho`.
pub fn common_cokernel(jacs: &[JacobianMatrix], rho: f64) -> Result<MergeState> {
    fold_cokernels(&singular_bases(jacs)?, rho)
}

/// Critical space `C`: the orthogonal complement of the merged co-kernel.
pub fn critical_space(jacs: &[JacobianMatrix], rho: f64) -> Result<SubspaceBasis> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(common_cokernel(jacs, rho)?.basis.complement())
}

/// A maximal range of thresholds with one critical-space dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    /// Exclusive lower end.
    pub rho_lo: f64,
    /// Inclusive upper end; the last plateau ends at 1, exclusive.
    pub rho_hi: f64,
    pub dim: usize,
    /// Threshold at which `critical_space` was evaluated.
    pub rho_representative: f64,
    pub critical_space: SubspaceBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoScan {
    pub ambient_dim: usize,
    pub sample_count: usize,
    pub plateaus: Vec<Plateau>,
}

impl RhoScan {
    /// One critical space per distinct dimension, taken from the plateau
    /// with the largest logarithmic width.
    pub fn candidates(&self) -> Vec<&Plateau> {
        let mut best: Vec<&Plateau> = Vec::new();
        for p in &self.plateaus {
            match best.iter_mut().find(|b| b.dim == p.dim) {
                Some(b) if log_width(p) > log_width(b) => *b = p,
                Some(_) => {}
                None => best.push(p),
            }
        }
        best.sort_by_key(|p| p.dim);
        best
    }
}

fn log_width(p: &Plateau) -> f64 {
    (p.rho_hi / p.rho_lo.max(f64::MIN_POSITIVE)).ln()
}

/// Every distinct critical space obtainable for `rho ∈ (0, 1)`.
///
/// Each per-sample co-kernel, and hence the merged result, can only change
/// where `rho` crosses a singular-value ratio `σ_j/σ_max` of some sample.
/// The scan collects these breakpoints, evaluates the critical space once
/// inside every interval between them and joins neighbouring intervals of
/// equal dimension, so interval ends are exact.
pub fn rho_scan(jacs: &[JacobianMatrix]) -> Result<RhoScan> {
    let bases = singular_bases(jacs)?;
    let n = jacs[0].n_features();
    let mut breaks: Vec<f64> = bases
        .iter()
        .flat_map(|b| b.ratios().iter().copied())
        .filter(|r| *r > 0.0 && *r < 1.0)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut edges = vec![0.0];
    edges.extend(breaks);
    edges.push(1.0);

    let intervals: Vec<(f64, f64, f64)> = edges.windows(2).map(|w| (w[0], w[1], representative(w[0], w[1]))).collect();
    let dims: Vec<usize> = intervals
        .par_iter()
        .map(|&(_, _, rho)| fold_cokernels(&bases, rho).map(|s| n - s.basis.dim()))
        .collect::<Result<_>>()?;

    let mut plateaus = Vec::new();
    let mut start = 0;
    for i in 1..=intervals.len() {
        if i == intervals.len() || dims[i] != dims[start] {
            let run = &intervals[start..i];
            let widest = run
                .iter()
                .max_by(|a, b| interval_log_width(a).total_cmp(&interval_log_width(b)))
                .expect("nonempty run");
            let rho = widest.2;
            plateaus.push(Plateau {
                rho_lo: run[0].0,
                rho_hi: run[run.len() - 1].1,
                dim: dims[start],
                rho_representative: rho,
                critical_space: fold_cokernels(&bases, rho)?.basis.complement(),
            });
            start = i;
        }
    }
    Ok(RhoScan {
        ambient_dim: n,
        sample_count: jacs.len(),
        plateaus,
    })
}

fn representative(lo: f64, hi: f64) -> f64 {
    if lo == 0.0 {
        hi / 2.0
    } else if hi == 1.0 {
        (lo + 1.0) / 2.0
    } else {
        (lo * hi).sqrt()
    }
}

fn interval_log_width(iv: &(f64, f64, f64)) -> f64 {
    (iv.1 / iv.0.max(f64::MIN_POSITIVE)).ln()
}
