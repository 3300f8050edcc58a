//! Feature aggregation, the significance measure and the closed-form
//! gradient factorization through `Z_k`.
//!
//! With `ȳ = y/‖y‖` and `q = xᵀȳ` the significance of a response `y` for
//! an objective `x` is `S_x(y) = (xᵀy)·q^k`, and its gradient factors as
//! `∇S_x(y)ᵀ = (k+1) q^k Z_k(y) x` with `Z_k(y) = Id - k/(k+1) ȳȳᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{pool_argmax, JacobianMatrix};
use crate::tensor::{dot, norm, Tensor};

const UNIT_TOLERANCE: f64 = 1e-9;

/// A unit vector in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureObjective(Vec<f64>);

impl FeatureObjective {
    /// Wraps `x`, which must already have unit length.
    pub fn new(x: Vec<f64>) -> Result<Self> {
        let n = norm(&x);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "feature objective must be unit-norm, has norm {n}"
            )));
        }
        Ok(Self(x))
    }

    /// Normalizes `x`; fails for the zero vector.
    pub fn normalized(x: Vec<f64>) -> Result<Self> {
        let n = norm(&x);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("cannot normalize a zero vector".into()));
        }
        Ok(Self(x.into_iter().map(|v| v / n).collect()))
    }

    pub fn canonical(n_f: usize, i: usize) -> Self {
        let mut x = vec![0.0; n_f];
        x[i] = 1.0;
        Self(x)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for FeatureObjective {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FeatureObjective> for Vec<f64> {
    fn from(x: FeatureObjective) -> Vec<f64> {
        x.0
    }
}

/// Aggregated feature response `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureResponse {
    y: Vec<f64>,
}

impl FeatureResponse {
    pub fn new(y: Vec<f64>) -> Self {
        Self { y }
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.y)
    }

    /// `ȳ = y / ‖y‖`.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::ZeroResponse);
        }
        Ok(self.y.iter().map(|v| v / n).collect())
    }

    pub fn direction(&self) -> Result<FeatureObjective> {
        Ok(FeatureObjective(self.normalized()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// 3x3 stride-1 max pooling (no padding), then the per-channel mean.
    MaxpoolMean,
    /// Per-channel spatial mean.
    Mean,
    /// Value at `(H/2, W/2)` (integer division) per channel.
    PickCenter,
    /// Activations are already a feature vector.
    Identity,
}

const POOL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceConfig {
    /// Power of the cosine term.
    pub k: u32,
    pub aggregation: Aggregation,
}

/// Reduces an activation tensor to one value per feature.
///
/// Spatial modes expect `[H, W, n_f]`; `Identity` expects `[n_f]`.
pub fn aggregate(activations: &Tensor, mode: Aggregation) -> Result<FeatureResponse> {
    let shape = activations.shape();
    let a = activations.data();
    if mode == Aggregation::Identity {
        if shape.len() != 1 {
            return Err(Error::shape("identity aggregation", &[0], shape));
        }
        return Ok(FeatureResponse::new(a.to_vec()));
    }
    let (h, w, c) = spatial(shape, mode)?;
    let mut y = vec![0.0; c];
    match mode {
        Aggregation::Mean => {
            for (i, v) in a.iter().enumerate() {
                y[i % c] += v;
            }
            let n = (h * w) as f64;
            y.iter_mut().for_each(|v| *v /= n);
        }
        Aggregation::PickCenter => {
            let base = ((h / 2) * w + w / 2) * c;
            y.copy_from_slice(&a[base..base + c]);
        }
        Aggregation::MaxpoolMean => {
            let (oh, ow) = (h - POOL + 1, w - POOL + 1);
            for oy in 0..oh {
                for ox in 0..ow {
                    for (ch, yc) in y.iter_mut().enumerate() {
                        *yc += a[pool_argmax(a, w, c, oy, ox, POOL, ch)];
                    }
                }
            }
            let n = (oh * ow) as f64;
            y.iter_mut().for_each(|v| *v /= n);
        }
        Aggregation::Identity => unreachable!(),
    }
    Ok(FeatureResponse::new(y))
}

/// Pulls a cotangent of the feature response back to the activations.
pub fn aggregate_vjp(activations: &Tensor, mode: Aggregation, cotangent: &[f64]) -> Result<Tensor> {
    let shape = activations.shape();
    if mode == Aggregation::Identity {
        if shape != [cotangent.len()] {
            return Err(Error::shape("identity aggregation cotangent", shape, &[cotangent.len()]));
        }
        return Tensor::new(shape.to_vec(), cotangent.to_vec());
    }
    let (h, w, c) = spatial(shape, mode)?;
    if cotangent.len() != c {
        return Err(Error::shape("aggregation cotangent", &[c], &[cotangent.len()]));
    }
    let a = activations.data();
    let mut g = vec![0.0; a.len()];
    match mode {
        Aggregation::Mean => {
            let n = (h * w) as f64;
            for (i, gv) in g.iter_mut().enumerate() {
                *gv = cotangent[i % c] / n;
            }
        }
        Aggregation::PickCenter => {
            let base = ((h / 2) * w + w / 2) * c;
            g[base..base + c].copy_from_slice(cotangent);
        }
        Aggregation::MaxpoolMean => {
            let (oh, ow) = (h - POOL + 1, w - POOL + 1);
            let n = (oh * ow) as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    for (ch, cv) in cotangent.iter().enumerate() {
                        g[pool_argmax(a, w, c, oy, ox, POOL, ch)] += cv / n;
                    }
                }
            }
        }
        Aggregation::Identity => unreachable!(),
    }
    Tensor::new(shape.to_vec(), g)
}

fn spatial(shape: &[usize], mode: Aggregation) -> Result<(usize, usize, usize)> {
    let [h, w, c] = shape else {
        return Err(Error::shape(format!("{mode:?} aggregation"), &[0, 0, 0], shape));
    };
    if mode == Aggregation::MaxpoolMean && (*h < POOL || *w < POOL) {
        return Err(Error::InvalidArgument(format!(
            "max-pool aggregation needs spatial dims >= {POOL}, got {h}x{w}"
        )));
    }
    if *h == 0 || *w == 0 {
        return Err(Error::InvalidArgument("empty activation map".into()));
    }
    Ok((*h, *w, *c))
}

/// `S_x(y) = (xᵀy)·(xᵀy/‖y‖)^k`.
pub fn significance(x: &FeatureObjective, y: &FeatureResponse, k: u32) -> Result<f64> {
    check_dims(x, y)?;
    let n = y.norm();
    if !(n > 0.0) {
        return Err(Error::ZeroResponse);
    }
    let a = dot(x.as_slice(), y.values());
    Ok(a * (a / n).powi(k as i32))
}

/// `S_x(y)` and `∂S_x/∂y`, by a reverse sweep over the elementary
/// operations `a = xᵀy`, `n = ‖y‖`, `q = a/n`, `p = q^k`, `s = a·p`.
///
/// This is the automatic-differentiation route; it does not use `Z_k`.
pub fn significance_with_grad(x: &FeatureObjective, y: &FeatureResponse, k: u32) -> Result<(f64, Vec<f64>)> {
    check_dims(x, y)?;
    let yv = y.values();
    let n = norm(yv);
    if !(n > 0.0) {
        return Err(Error::ZeroResponse);
    }
    let a = dot(x.as_slice(), yv);
    let q = a / n;
    let p = q.powi(k as i32);
    let s = a * p;

    let ds = 1.0;
    let mut da = ds * p;
    let dp = ds * a;
    let dq = if k == 0 { 0.0 } else { dp * k as f64 * q.powi(k as i32 - 1) };
    da += dq / n;
    let dn = -dq * a / (n * n);
    let grad = x
        .as_slice()
        .iter()
        .zip(yv)
        .map(|(xi, yi)| da * xi + dn * yi / n)
        .collect();
    Ok((s, grad))
}

fn check_dims(x: &FeatureObjective, y: &FeatureResponse) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("objective vs response", &[y.len()], &[x.len()]));
    }
    Ok(())
}

/// `Z_k(y) = Id - k/(k+1)·ȳȳᵀ`, exactly symmetric.
pub fn z_matrix(y: &FeatureResponse, k: u32) -> Result<Matrix> {
    let yb = y.normalized()?;
    let c = k as f64 / (k as f64 + 1.0);
    Ok(rank_one_update(&yb, -c))
}

/// `Z_k(y)⁻¹ = Id + k·ȳȳᵀ` (Sherman-Morrison).
pub fn z_inverse(y: &FeatureResponse, k: u32) -> Result<Matrix> {
    let yb = y.normalized()?;
    Ok(rank_one_update(&yb, k as f64))
}

fn rank_one_update(u: &[f64], c: f64) -> Matrix {
    let n = u.len();
    let mut m = Matrix::identity(n);
    for i in 0..n {
        for j in 0..=i {
            let v = c * u[i] * u[j];
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
    }
    m
}

/// Significance value, cosine term and the input-space gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEval {
    pub value: f64,
    /// `q = xᵀȳ`.
    pub q: f64,
    /// `∇(f_x ∘ P)(v)`, length `n_p`.
    pub grad_row: Vec<f64>,
}

/// `(k+1)·q^k·xᵀ·Z_k(y)·Dy` together with `S_x(y)` and `q`.
pub fn closed_form_gradient(
    x: &FeatureObjective,
    y: &FeatureResponse,
    jac: &JacobianMatrix,
    k: u32,
) -> Result<SignificanceEval> {
    check_dims(x, y)?;
    if jac.n_features() != y.len() {
        return Err(Error::shape("jacobian rows", &[y.len()], &[jac.n_features()]));
    }
    let yb = y.normalized()?;
    let q = dot(x.as_slice(), &yb);
    let value = significance(x, y, k)?;
    let z = z_matrix(y, k)?;
    let xz = z.vec_mul(x.as_slice());
    let factor = (k as f64 + 1.0) * q.powi(k as i32);
    let grad_row = jac.matrix().vec_mul(&xz).into_iter().map(|g| factor * g).collect();
    Ok(SignificanceEval { value, q, grad_row })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn resp(v: &[f64]) -> FeatureResponse {
        FeatureResponse::new(v.to_vec())
    }

    #[test]
    fn constant_map_aggregates_to_constant() {
        let mut data = Vec::new();
        for _ in 0..5 * 4 {
            data.extend_from_slice(&[1.5, -2.0]);
        }
        let t = Tensor::new(vec![5, 4, 2], data).unwrap();
        for mode in [Aggregation::MaxpoolMean, Aggregation::Mean, Aggregation::PickCenter] {
            let y = aggregate(&t, mode).unwrap();
            assert_eq!(y.values(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn single_window_maxpool_mean_is_max() {
        let t = Tensor::new(vec![3, 3, 1], vec![0.1, 0.5, -1.0, 2.5, 0.0, 0.3, 1.0, 2.0, -3.0]).unwrap();
        assert_eq!(aggregate(&t, Aggregation::MaxpoolMean).unwrap().values(), &[2.5]);
    }

    #[test]
    fn maxpool_mean_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, c) = (6, 6, 4);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![h, w, c], data.clone()).unwrap();
        let y = aggregate(&t, Aggregation::MaxpoolMean).unwrap();
        for ch in 0..c {
            let mut total = 0.0;
            for oy in 0..h - 2 {
                for ox in 0..w - 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            m = m.max(data[((oy + dy) * w + ox + dx) * c + ch]);
                        }
                    }
                    total += m;
                }
            }
            assert_eq!(y.values()[ch], total / 16.0);
        }
    }

    #[test]
    fn pick_center_even_dims_uses_floor() {
        let t = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(aggregate(&t, Aggregation::PickCenter).unwrap().values(), &[10.0]);
    }

    #[test]
    fn maxpool_mean_rejects_small_maps() {
        let t = Tensor::zeros(&[2, 5, 1]);
        assert!(aggregate(&t, Aggregation::MaxpoolMean).is_err());
        assert!(aggregate(&t, Aggregation::Mean).is_ok());
        assert!(aggregate(&Tensor::zeros(&[3]), Aggregation::Mean).is_err());
    }

    #[test]
    fn significance_examples() {
        let y = resp(&[3.0, 4.0]);
        let ybar = y.direction().unwrap();
        for k in [0, 1, 2, 7] {
            assert!((significance(&ybar, &y, k).unwrap() - 5.0).abs() < 1e-14);
        }
        let x = FeatureObjective::canonical(2, 0);
        assert!((significance(&x, &y, 2).unwrap() - 1.08).abs() < 1e-14);
        let perp = FeatureObjective::new(vec![0.8, -0.6]).unwrap();
        assert!(significance(&perp, &y, 0).unwrap().abs() < 1e-15);
        assert!(matches!(significance(&x, &resp(&[0.0, 0.0]), 1), Err(Error::ZeroResponse)));
    }

    #[test]
    fn z_examples() {
        let y = resp(&[0.3, -1.2, 2.0]);
        assert_eq!(z_matrix(&y, 0).unwrap(), Matrix::identity(3));
        let z = z_matrix(&resp(&[2.0, 0.0, 0.0]), 2).unwrap();
        assert!((z[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(z[(1, 1)], 1.0);
        assert_eq!(z[(0, 1)], 0.0);
        assert!(z_matrix(&resp(&[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn z_inverse_is_exact_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in [0, 1, 2, 5, 50] {
            let y = resp(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let z = z_matrix(&y, k).unwrap();
            assert_eq!(z, z.transpose());
            let prod = z.matmul(&z_inverse(&y, k).unwrap()).unwrap();
            assert!(prod.sub(&Matrix::identity(6)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_sweep_matches_z_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in [0, 1, 2, 5] {
            let y = resp(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let x = FeatureObjective::normalized((0..5).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let (_, g) = significance_with_grad(&x, &y, k).unwrap();
            let q = dot(x.as_slice(), &y.normalized().unwrap());
            let zx = z_matrix(&y, k).unwrap().mul_vec(x.as_slice());
            for (a, b) in g.iter().zip(&zx) {
                let expected = (k as f64 + 1.0) * q.powi(k as i32) * b;
                assert!((a - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_k0_is_x_times_jacobian() {
        let jac = JacobianMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap()).unwrap();
        let x = FeatureObjective::normalized(vec![1.0, 1.0]).unwrap();
        let eval = closed_form_gradient(&x, &resp(&[0.4, 0.2]), &jac, 0).unwrap();
        let expected = jac.matrix().vec_mul(x.as_slice());
        assert_eq!(eval.grad_row, expected);
    }

    #[test]
    fn closed_form_vanishes_when_orthogonal() {
        let jac = JacobianMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let x = FeatureObjective::canonical(2, 1);
        let eval = closed_form_gradient(&x, &resp(&[2.0, 0.0]), &jac, 2).unwrap();
        assert_eq!(eval.q, 0.0);
        assert!(eval.grad_row.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn objective_rejects_non_unit() {
        assert!(FeatureObjective::new(vec![1.0, 1.0]).is_err());
        assert!(FeatureObjective::normalized(vec![0.0, 0.0]).is_err());
        let parsed: std::result::Result<FeatureObjective, _> = serde_json::from_str("[0.6, 0.8]");
        assert!(parsed.is_ok());
        let bad: std::result::Result<FeatureObjective, _> = serde_json::from_str("[1.0, 1.0]");
        assert!(bad.is_err());
    }
}
