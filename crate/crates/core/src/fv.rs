//! Feature visualization: maximizes `S_x(y(v))` over parameters `v` with
//! Adam followed by L-BFGS refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ssim;
use crate::network::Differentiable;
use crate::objective::{significance_with_grad, FeatureObjective, FeatureResponse};
use crate::optim::{adam_step, lbfgs_refine, AdamConfig, AdamState, LbfgsConfig};
use crate::pipeline::FeaturePipeline;
use crate::tensor::{norm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FvConfig {
    pub adam_steps: usize,
    pub adam_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lbfgs_steps: usize,
    pub lbfgs_history: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization of `v`.
    pub init_scale: f64,
}

impl Default for FvConfig {
    fn default() -> Self {
        Self {
            adam_steps: 800,
            adam_lr: 5e-2,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            lbfgs_steps: 300,
            lbfgs_history: 10,
            seed: 0,
            init_scale: 0.01,
        }
    }
}

impl FvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0) || !self.adam_lr.is_finite() {
            return Err(Error::Config(format!("adam_lr must be positive, got {}", self.adam_lr)));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("adam_eps must be positive and init_scale nonnegative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam_lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub phase: Phase,
    pub step: usize,
    /// `S_x` at the start of the step (Adam) or after it (L-BFGS).
    pub value: f64,
}

/// Result of one feature visualization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub v_star: Tensor,
    pub image: Tensor,
    pub y: FeatureResponse,
    pub final_value: f64,
    pub grad_norm_at_opt: f64,
    pub lbfgs_line_search_failed: bool,
    pub trace: Vec<TracePoint>,
}

/// `(-S_x, -∇_v S_x)` at `v`.
fn loss_and_grad(pipeline: &FeaturePipeline, x: &FeatureObjective, k: u32, v: &Tensor) -> Result<(f64, Tensor, Tensor, FeatureResponse)> {
    let tape = pipeline.record(v)?;
    let y = tape.response();
    let (s, dy) = significance_with_grad(x, &y, k)?;
    let g = pipeline.backward(&tape, &Tensor::from_vec(dy))?;
    Ok((-s, g.map(|v| -v), tape.image().clone(), y))
}

fn check_objective(pipeline: &FeaturePipeline, x: &FeatureObjective) -> Result<()> {
    if x.len() != pipeline.n_features() {
        return Err(Error::shape("objective", &[pipeline.n_features()], &[x.len()]));
    }
    Ok(())
}

/// Runs Adam then L-BFGS from `v0`, minimizing `-S_x`.
fn optimize(
    pipeline: &FeaturePipeline,
    x: &FeatureObjective,
    k: u32,
    fv: &FvConfig,
    v0: Tensor,
    adam_steps: usize,
    lbfgs_steps: usize,
) -> Result<Realization> {
    let shape = v0.shape().to_vec();
    let mut v = v0;
    let mut state = AdamState::new(v.len());
    let adam = fv.adam();
    let mut trace = Vec::with_capacity(adam_steps + lbfgs_steps);
    for step in 0..adam_steps {
        let (loss, g, _, _) = loss_and_grad(pipeline, x, k, &v).map_err(|e| diverged(e, step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "adam loss".into(),
            });
        }
        trace.push(TracePoint {
            phase: Phase::Adam,
            step,
            value: -loss,
        });
        adam_step(&mut state, v.data_mut(), g.data(), &adam).map_err(|e| diverged(e, step))?;
    }

    let mut line_search_failed = false;
    if lbfgs_steps > 0 {
        let cfg = LbfgsConfig {
            max_steps: lbfgs_steps,
            history: fv.lbfgs_history,
            ..LbfgsConfig::default()
        };
        let out = lbfgs_refine(
            v.data().to_vec(),
            |p| {
                let t = Tensor::new(shape.clone(), p.to_vec())?;
                let (loss, g, _, _) = loss_and_grad(pipeline, x, k, &t)?;
                Ok((loss, g.into_data()))
            },
            &cfg,
        )
        .map_err(|e| diverged(e, adam_steps))?;
        trace.extend(out.trace.iter().enumerate().map(|(i, l)| TracePoint {
            phase: Phase::Lbfgs,
            step: adam_steps + i,
            value: -l,
        }));
        line_search_failed = out.line_search_failed;
        v = Tensor::new(shape, out.x)?;
    }

    let (loss, g, image, y) = loss_and_grad(pipeline, x, k, &v)?;
    Ok(Realization {
        v_star: v,
        image,
        y,
        final_value: -loss,
        grad_norm_at_opt: norm(g.data()),
        lbfgs_line_search_failed: line_search_failed,
        trace,
    })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged { step, what },
        Error::Diverged { what, .. } => Error::Diverged { step, what },
        other => other,
    }
}

/// Gaussian start `v ~ N(0, init_scale²)` drawn from `seed`.
pub fn initial_parameters(shape: &[usize], init_scale: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, init_scale).map_err(|e| Error::Config(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
}

/// Maximizes `S_x ∘ agg ∘ N ∘ P` for objective `x`.
pub fn run_fv(pipeline: &FeaturePipeline, x: &FeatureObjective, k: u32, fv: &FvConfig) -> Result<Realization> {
    check_objective(pipeline, x)?;
    fv.validate()?;
    let v0 = initial_parameters(pipeline.input_shape(), fv.init_scale, fv.seed)?;
    optimize(pipeline, x, k, fv, v0, fv.adam_steps, fv.lbfgs_steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reoptimization {
    pub image_after: Tensor,
    /// SSIM between the realization's image and `image_after`.
    pub ssim: f64,
}

/// Continues from `v*` with a fresh Adam state for `steps` steps towards
/// `x_new`.
pub fn reoptimize(
    pipeline: &FeaturePipeline,
    realization: &Realization,
    x_new: &FeatureObjective,
    k: u32,
    steps: usize,
    fv: &FvConfig,
) -> Result<Reoptimization> {
    check_objective(pipeline, x_new)?;
    fv.validate()?;
    let out = optimize(pipeline, x_new, k, fv, realization.v_star.clone(), steps, 0)?;
    let ssim = ssim(&realization.image, &out.image)?;
    Ok(Reoptimization {
        image_after: out.image,
        ssim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Layer, Network};
    use crate::objective::Aggregation;
    use crate::parametrize::{ParamKind, Parametrization};

    #[test]
    fn monotone_single_feature_saturates() {
        let p = Parametrization::new(ParamKind::Rgb, 1, 1, 1).unwrap();
        let net = Network::new(vec![1, 1, 1], vec![Layer::Flatten]).unwrap();
        let pipe = FeaturePipeline::new(p, net, Aggregation::Identity).unwrap();
        let fv = FvConfig {
            adam_steps: 100,
            lbfgs_steps: 0,
            ..Default::default()
        };
        let r = run_fv(&pipe, &FeatureObjective::canonical(1, 0), 0, &fv).unwrap();
        assert!(r.v_star.data()[0] > 3.0, "{:?}", r.v_star);
        assert!(r.image.data()[0] > 0.95);
        assert!(r.grad_norm_at_opt < 0.05);
        let adam: Vec<f64> = r.trace.iter().map(|t| t.value).collect();
        assert!(adam.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_steps_reoptimization_is_identity() {
        let p = Parametrization::new(ParamKind::Rgb, 8, 8, 1).unwrap();
        let net = Network::new(vec![8, 8, 1], vec![Layer::Relu]).unwrap();
        let pipe = FeaturePipeline::new(p, net, Aggregation::Mean).unwrap();
        let fv = FvConfig {
            adam_steps: 20,
            lbfgs_steps: 5,
            ..Default::default()
        };
        let x = FeatureObjective::canonical(1, 0);
        let r = run_fv(&pipe, &x, 2, &fv).unwrap();
        let again = run_fv(&pipe, &x, 2, &fv).unwrap();
        assert_eq!(r, again);
        let re = reoptimize(&pipe, &r, &x, 2, 0, &fv).unwrap();
        assert_eq!(re.ssim, 1.0);
        assert_eq!(re.image_after, r.image);
    }

    #[test]
    fn objective_dimension_is_checked() {
        let p = Parametrization::new(ParamKind::Rgb, 1, 1, 1).unwrap();
        let net = Network::new(vec![1, 1, 1], vec![Layer::Flatten]).unwrap();
        let pipe = FeaturePipeline::new(p, net, Aggregation::Identity).unwrap();
        let x = FeatureObjective::canonical(2, 0);
        assert!(run_fv(&pipe, &x, 0, &FvConfig::default()).is_err());
    }
}
