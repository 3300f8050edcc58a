//! First- and quasi-second-order minimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter of one Adam run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` (minimization).
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam gradient", &[params.len()], &[grad.len()]));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_steps: usize,
    pub history: usize,
    /// Stop once the gradient norm falls to this value.
    pub grad_tol: f64,
    /// Sufficient-decrease constant of the Armijo condition.
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_steps: 300,
            history: 10,
            grad_tol: 1e-12,
            armijo_c1: 1e-4,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub steps: usize,
    /// Set when no step satisfying the Armijo condition could be found.
    pub line_search_failed: bool,
    /// Objective value after every accepted step.
    pub trace: Vec<f64>,
}

/// Minimizes `f` starting at `x0`; `f` returns the value and gradient.
///
/// On line-search failure the best point so far is returned with
/// `line_search_failed` set.
pub fn lbfgs_refine<F>(x0: Vec<f64>, mut f: F, cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            what: "l-bfgs initial point".into(),
        });
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut trace = Vec::new();
    let mut failed = false;
    let mut steps = 0;
    while steps < cfg.max_steps && norm(&g) > cfg.grad_tol {
        let mut accepted = None;
        for attempt in 0..2 {
            let steepest = attempt == 1 || s_hist.is_empty();
            let d = if steepest {
                g.iter().map(|v| -v).collect()
            } else {
                two_loop(&g, &s_hist, &y_hist)
            };
            let slope = dot(&g, &d);
            if !(slope < 0.0) {
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            let mut alpha = if steepest { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
            for _ in 0..cfg.max_backtracks {
                let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                match f(&xn) {
                    Ok((fn_, gn)) if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) => {
                        if fn_ <= fx + cfg.armijo_c1 * alpha * slope {
                            accepted = Some((xn, fn_, gn));
                            break;
                        }
                    }
                    Ok(_) | Err(Error::NonFinite(_)) | Err(Error::ZeroResponse) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
            if steepest {
                break;
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            failed = true;
            log::warn!("l-bfgs line search failed after {steps} steps; keeping best point");
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) && sy > 0.0 {
            if s_hist.len() == cfg.history.max(1) {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
        x = xn;
        fx = fn_;
        g = gn;
        steps += 1;
        trace.push(fx);
    }
    Ok(LbfgsOutcome {
        x,
        value: fx,
        grad: g,
        steps,
        line_search_failed: failed,
        trace,
    })
}

/// `-H·g` for the inverse-Hessian approximation held in the history.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; s_hist.len()];
    for i in (0..s_hist.len()).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alphas[i] = rho * dot(&s_hist[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
            *qj -= alphas[i] * yj;
        }
    }
    let last = s_hist.len() - 1;
    let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
    q.iter_mut().for_each(|v| *v *= gamma);
    for i in 0..s_hist.len() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let beta = rho * dot(&y_hist[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
            *qj += (alphas[i] - beta) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
