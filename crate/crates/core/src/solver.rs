//! Recovery of the target objective from a realization.
//!
//! Minimizes `‖xᵀ Z_k(y) Dy‖²` over unit `x` with `Z_k(y)·x ∈ C`. With
//! `U` an orthonormal basis of `Z_k⁻¹·C`, every feasible `x` is `U·σ`, and
//! the minimizer is the eigenvector of `M·Mᵀ` (`M = Uᵀ Z_k Dy`) for its
//! smallest eigenvalue.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthogonal_complement, orthonormality_residual, qr, svd, sym_eig, Matrix};
use crate::network::JacobianMatrix;
use crate::objective::{z_inverse, z_matrix, FeatureObjective, FeatureResponse};
use crate::tensor::{dot, norm};

/// `k` used to approximate the `k → ∞` limit.
pub const K_LIMIT: u32 = 200;

const ORTHONORMAL_TOLERANCE: f64 = 1e-10;
/// Relative eigenvalue gap below which the smallest eigenvalue counts as
/// repeated.
const MULTIPLICITY_TOLERANCE: f64 = 1e-10;

/// Subspace of feature space given by orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct SubspaceBasis {
    basis: Matrix,
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    ambient_dim: usize,
    /// One entry per basis vector.
    vectors: Vec<Vec<f64>>,
}

impl TryFrom<BasisRepr> for SubspaceBasis {
    type Error = Error;
    fn try_from(r: BasisRepr) -> Result<Self> {
        if r.vectors.iter().any(|v| v.len() != r.ambient_dim) {
            return Err(Error::Format("basis vector length differs from ambient_dim".into()));
        }
        Self::new(Matrix::from_columns(r.ambient_dim, &r.vectors))
    }
}

impl From<SubspaceBasis> for BasisRepr {
    fn from(b: SubspaceBasis) -> Self {
        BasisRepr {
            ambient_dim: b.ambient_dim(),
            vectors: b.basis.columns(),
        }
    }
}

impl SubspaceBasis {
    /// Wraps `basis` (`n_f × d`), whose columns must be orthonormal.
    pub fn new(basis: Matrix) -> Result<Self> {
        if basis.cols() > basis.rows() {
            return Err(Error::shape("subspace basis", &[basis.rows(), basis.rows()], &[basis.rows(), basis.cols()]));
        }
        if basis.cols() > 0 && orthonormality_residual(&basis) > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidArgument("subspace basis columns are not orthonormal".into()));
        }
        Ok(Self { basis })
    }

    /// Orthonormalizes `vectors` by QR; they must be linearly independent.
    pub fn from_vectors(ambient_dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.is_empty() {
            return Ok(Self::empty(ambient_dim));
        }
        let (q, r) = qr(&Matrix::from_columns(ambient_dim, vectors));
        let scale = r.max_abs();
        if (0..r.rows()).any(|i| r[(i, i)] <= 1e-12 * scale) {
            return Err(Error::InvalidArgument("subspace vectors are linearly dependent".into()));
        }
        Self::new(q)
    }

    /// `C = ℝ^n`.
    pub fn full(n: usize) -> Self {
        Self {
            basis: Matrix::identity(n),
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            basis: Matrix::zeros(n, 0),
        }
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn is_full(&self) -> bool {
        self.dim() == self.ambient_dim()
    }

    pub fn complement(&self) -> SubspaceBasis {
        Self {
            basis: orthogonal_complement(&self.basis),
        }
    }

    /// Orthogonal projection of `v` onto the subspace.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let coeffs = self.basis.vec_mul(v);
        self.basis.mul_vec(&coeffs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub x_hat: FeatureObjective,
    /// Coordinates of `x_hat` in `substitution_u`, unit length.
    pub sigma: Vec<f64>,
    pub smallest_singular_value: f64,
    /// Singular values of `M`, ascending.
    pub singular_values: Vec<f64>,
    pub substitution_u: Matrix,
    /// The smallest singular value of `M` is repeated.
    pub multiplicity: bool,
    /// `M` vanishes, so every feasible `x` is optimal.
    pub degenerate: bool,
}

/// Flips `v` so that `vᵀy ≥ 0`; on a tie the first nonzero entry is made
/// positive.
pub(crate) fn orient(v: &mut [f64], y: &[f64]) {
    let d = dot(v, y);
    let tie = d.abs() <= 1e-14 * norm(v) * norm(y);
    let flip = if tie {
        v.iter().find(|e| **e != 0.0).is_some_and(|e| *e < 0.0)
    } else {
        d < 0.0
    };
    if flip {
        v.iter_mut().for_each(|e| *e = -*e);
    }
}

/// Solves the constrained recovery problem for one realization.
pub fn predict_objective(
    y: &FeatureResponse,
    jac: &JacobianMatrix,
    k: u32,
    c: &SubspaceBasis,
) -> Result<Prediction> {
    let n_f = y.len();
    if jac.n_features() != n_f {
        return Err(Error::shape("jacobian rows", &[n_f], &[jac.n_features()]));
    }
    if c.ambient_dim() != n_f {
        return Err(Error::shape("critical space ambient dim", &[n_f], &[c.ambient_dim()]));
    }
    if c.dim() == 0 {
        return Err(Error::EmptyCriticalSpace);
    }
    let z = z_matrix(y, k)?;
    let u = svd(&z_inverse(y, k)?.matmul(c.basis())?)?.u;
    let m = u.transpose().matmul(&z)?.matmul(jac.matrix())?;
    let (eigenvalues, vectors) = sym_eig(&m.gram_rows())?;
    let d = eigenvalues.len();
    let sigma = vectors.column(d - 1);
    let mut x = u.mul_vec(&sigma);
    let n = norm(&x);
    x.iter_mut().for_each(|v| *v /= n);
    orient(&mut x, y.values());
    let sigma = u.vec_mul(&x);

    let top = eigenvalues[0].max(0.0);
    let degenerate = !(top > 0.0);
    let multiplicity = degenerate || (d > 1 && eigenvalues[d - 2] - eigenvalues[d - 1] <= MULTIPLICITY_TOLERANCE * top);
    let singular_values: Vec<f64> = eigenvalues.iter().rev().map(|e| e.max(0.0).sqrt()).collect();
    Ok(Prediction {
        x_hat: FeatureObjective::normalized(x)?,
        sigma,
        smallest_singular_value: singular_values[0],
        singular_values,
        substitution_u: u,
        multiplicity,
        degenerate,
    })
}

/// `normalize(Z_k⁻¹ C Cᵀ Z_k x)`, the representative of `x_true` that the
/// solver can recover under `C`.
pub fn project_objective(
    x_true: &FeatureObjective,
    y: &FeatureResponse,
    k: u32,
    c: &SubspaceBasis,
) -> Result<FeatureObjective> {
    if c.ambient_dim() != x_true.len() {
        return Err(Error::shape("critical space ambient dim", &[x_true.len()], &[c.ambient_dim()]));
    }
    let zx = z_matrix(y, k)?.mul_vec(x_true.as_slice());
    let p = c.project(&zx);
    if norm(&p) <= 1e-12 * norm(&zx) {
        return Err(Error::UnrecoverableObjective);
    }
    FeatureObjective::normalized(z_inverse(y, k)?.mul_vec(&p))
}

/// `‖(I - CCᵀ) Z_k x‖² / ‖Z_k x‖²`.
pub fn out_of_c_fraction(x_true: &FeatureObjective, y: &FeatureResponse, k: u32, c: &SubspaceBasis) -> Result<f64> {
    let zx = z_matrix(y, k)?.mul_vec(x_true.as_slice());
    let p = c.project(&zx);
    let total = dot(&zx, &zx);
    let inside = dot(&p, &p);
    Ok(((total - inside) / total).clamp(0.0, 1.0))
}

/// Prediction at `k = 200` over the full space, which approaches `ȳ`.
pub fn k_limit_check(y: &FeatureResponse, jac: &JacobianMatrix) -> Result<Prediction> {
    predict_objective(y, jac, K_LIMIT, &SubspaceBasis::full(y.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::angle_between;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_jac(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_row_feature_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = random_jac(2, 6, &mut rng);
        m.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let y = FeatureResponse::new(vec![0.3, 0.8]);
        let p = predict_objective(&y, &JacobianMatrix::new(m).unwrap(), 0, &SubspaceBasis::full(2)).unwrap();
        assert!((p.x_hat.as_slice()[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_left_null_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = FeatureObjective::normalized(vec![0.2, -0.5, 0.9]).unwrap();
        let dy = random_jac(3, 50, &mut rng);
        let us = u.as_slice();
        let proj = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 } - us[i] * us[j]);
        let dy = proj.matmul(&dy).unwrap();
        let y = FeatureResponse::new(vec![1.0, 0.4, 0.1]);
        let p = predict_objective(&y, &JacobianMatrix::new(dy).unwrap(), 0, &SubspaceBasis::full(3)).unwrap();
        let d = dot(p.x_hat.as_slice(), us).abs();
        assert!((d - 1.0).abs() < 1e-8);
        assert!(!p.multiplicity);
        assert!(dot(p.x_hat.as_slice(), y.values()) >= 0.0);
    }

    #[test]
    fn zero_jacobian_is_degenerate() {
        let y = FeatureResponse::new(vec![1.0, 2.0, 3.0]);
        let p = predict_objective(&y, &JacobianMatrix::new(Matrix::zeros(3, 4)).unwrap(), 2, &SubspaceBasis::full(3)).unwrap();
        assert!(p.degenerate && p.multiplicity);
        assert!((norm(p.x_hat.as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_critical_space_errors() {
        let y = FeatureResponse::new(vec![1.0, 2.0]);
        let jac = JacobianMatrix::new(Matrix::identity(2)).unwrap();
        assert!(matches!(
            predict_objective(&y, &jac, 1, &SubspaceBasis::empty(2)),
            Err(Error::EmptyCriticalSpace)
        ));
    }

    #[test]
    fn scale_invariance_and_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = FeatureResponse::new((0..5).map(|_| rng.random_range(0.1..1.0)).collect());
        let jac = JacobianMatrix::new(random_jac(5, 30, &mut rng)).unwrap();
        let c = SubspaceBasis::from_vectors(5, &[random_jac(5, 1, &mut rng).column(0), random_jac(5, 1, &mut rng).column(0), random_jac(5, 1, &mut rng).column(0)]).unwrap();
        let a = predict_objective(&y, &jac, 2, &c).unwrap();
        let b = predict_objective(&y, &jac.scaled(37.5), 2, &c).unwrap();
        assert!(angle_between(a.x_hat.as_slice(), b.x_hat.as_slice()) < 1e-6);
        let zx = z_matrix(&y, 2).unwrap().mul_vec(a.x_hat.as_slice());
        let residual: f64 = zx.iter().zip(c.project(&zx)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(residual < 1e-8);
        assert!((norm(&a.sigma) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let y = FeatureResponse::new(vec![0.5, 0.2, 0.9]);
        let x = FeatureObjective::normalized(vec![0.3, 0.3, 0.1]).unwrap();
        let full = project_objective(&x, &y, 2, &SubspaceBasis::full(3)).unwrap();
        assert!(angle_between(full.as_slice(), x.as_slice()) < 1e-6);
        let c = SubspaceBasis::from_vectors(3, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let e1 = FeatureObjective::canonical(3, 0);
        let p = project_objective(&e1, &y, 0, &c).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-15);
        let r = project_objective(&x, &y, 2, &c).unwrap();
        let zr = z_matrix(&y, 2).unwrap().mul_vec(r.as_slice());
        assert!(zr[2].abs() < 1e-10);
        let e3 = FeatureObjective::canonical(3, 2);
        assert!(matches!(project_objective(&e3, &y, 0, &c), Err(Error::UnrecoverableObjective)));
        assert!((out_of_c_fraction(&e3, &y, 0, &c).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_k_approaches_normalized_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = FeatureResponse::new((0..4).map(|_| rng.random_range(0.1..1.0)).collect());
        let jac = JacobianMatrix::new(random_jac(4, 20, &mut rng)).unwrap();
        let yb = y.normalized().unwrap();
        let far = k_limit_check(&y, &jac).unwrap();
        let near = predict_objective(&y, &jac, 2, &SubspaceBasis::full(4)).unwrap();
        let (a200, a2) = (angle_between(far.x_hat.as_slice(), &yb), angle_between(near.x_hat.as_slice(), &yb));
        assert!(a200 < a2 || (a200 < 1.0 && a2 < 1.0));
    }

    #[test]
    fn basis_serde_round_trip() {
        let c = SubspaceBasis::from_vectors(3, &[vec![1.0, 1.0, 0.0]]).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: SubspaceBasis = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<SubspaceBasis>(r#"{"ambient_dim":2,"vectors":[[1.0,1.0]]}"#).is_err());
    }
}
