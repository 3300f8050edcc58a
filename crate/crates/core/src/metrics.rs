//! Evaluation metrics: sign-invariant angular distance, SSIM and the
//! expansion of a target in the singular basis of its gradient operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::left_singular_full;
use crate::network::JacobianMatrix;
use crate::objective::{z_matrix, FeatureObjective, FeatureResponse};
use crate::tensor::{dot, Tensor};

/// Images below this SSIM against their reference count as unstable.
pub const STABILITY_THRESHOLD: f64 = 0.7;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `180/π · min(acos(aᵀb), acos(-aᵀb))`, in `[0, 90]`.
pub fn angular_distance(a: &FeatureObjective, b: &FeatureObjective) -> f64 {
    angle_between(a.as_slice(), b.as_slice())
}

pub(crate) fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let d = dot(a, b).clamp(-1.0, 1.0);
    d.acos().min((-d).acos()).to_degrees()
}

/// Mean SSIM over all 8x8 windows at stride 1, averaged over channels.
///
/// Window statistics use population (`1/N`) moments and the constants for
/// unit dynamic range. Images are `[H, W]` or `[H, W, C]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim operands", a.shape(), b.shape()));
    }
    let (h, w, c) = match *a.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("ssim image", &[0, 0, 0], a.shape())),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let i = ((y0 + dy) * w + x0 + dx) * c + ch;
                        let (p, q) = (ad[i], bd[i]);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

/// Coefficients of one target in the ascending-singular-value left basis of
/// `Z_k(y)·Dy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub coefficients: Vec<f64>,
    /// Singular values matching `coefficients`, ascending.
    pub singular_values: Vec<f64>,
    /// `90·(1 - c₀²)`, a quadratic stand-in for the angular distance.
    pub distance_proxy: f64,
}

/// Expands `x_true` in the left-singular vectors of `Z_k(y)·Dy`.
///
/// Basis vectors are oriented so that `vᵀy ≥ 0`, matching the sign
/// convention of the solver.
pub fn decompose(
    x_true: &FeatureObjective,
    y: &FeatureResponse,
    jac: &JacobianMatrix,
    k: u32,
) -> Result<DecompositionRow> {
    let zd = z_matrix(y, k)?.matmul(jac.matrix())?;
    let (u, s) = left_singular_full(&zd)?;
    let n = u.rows();
    let mut coefficients = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    for j in (0..n).rev() {
        let mut v = u.column(j);
        crate::solver::orient(&mut v, y.values());
        coefficients.push(dot(&v, x_true.as_slice()));
        singular_values.push(s[j]);
    }
    let c0 = coefficients[0];
    Ok(DecompositionRow {
        coefficients,
        singular_values,
        distance_proxy: 90.0 * (1.0 - c0 * c0),
    })
}

/// Per-order mean squared coefficients over a batch of decompositions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub rows: Vec<DecompositionRow>,
    /// `α_j = Σ_i c_{i,j}² / n`.
    pub alpha: Vec<f64>,
}

impl DecompositionReport {
    pub fn from_rows(rows: Vec<DecompositionRow>) -> Self {
        let width = rows.first().map_or(0, |r| r.coefficients.len());
        let mut alpha = vec![0.0; width];
        for r in &rows {
            for (a, c) in alpha.iter_mut().zip(&r.coefficients) {
                *a += c * c;
            }
        }
        let n = rows.len().max(1) as f64;
        alpha.iter_mut().for_each(|a| *a /= n);
        Self { rows, alpha }
    }
}
