#![allow(dead_code)]

use fvinv::linalg::Matrix;
use fvinv::{Differentiable, Layer, Network, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

pub fn unit_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = gaussian_vec(n, rng);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    g.into_iter().map(|v| v / norm).collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// conv3x3 → bias → `act` → conv3x3 → bias, valid padding.
pub fn conv_net(h: usize, w: usize, c: usize, hidden: usize, n_f: usize, act: Layer, rng: &mut ChaCha8Rng) -> Network {
    Network::new(
        vec![h, w, c],
        vec![
            Layer::Conv2d {
                weight: uniform(&[hidden, 3, 3, c], 0.6, rng),
                padding: Padding::Valid,
            },
            Layer::BiasAdd {
                bias: uniform(&[hidden], 0.2, rng),
            },
            act,
            Layer::Conv2d {
                weight: uniform(&[n_f, 3, 3, hidden], 0.6, rng),
                padding: Padding::Valid,
            },
            Layer::BiasAdd {
                bias: uniform(&[n_f], 0.2, rng),
            },
        ],
    )
    .unwrap()
}

/// Central-difference Jacobian, one row per output entry.
pub fn fd_jacobian<F: Differentiable>(f: &F, v: &Tensor, eps: f64) -> Matrix {
    let n_out: usize = f.output_shape().iter().product();
    let mut m = Matrix::zeros(n_out, v.len());
    for j in 0..v.len() {
        let mut plus = v.clone();
        plus.data_mut()[j] += eps;
        let mut minus = v.clone();
        minus.data_mut()[j] -= eps;
        let (a, b) = (f.eval(&plus).unwrap(), f.eval(&minus).unwrap());
        for i in 0..n_out {
            m[(i, j)] = (a.data()[i] - b.data()[i]) / (2.0 * eps);
        }
    }
    m
}

/// `‖a - b‖ / ‖b‖`, with `‖b‖` floored at `1e-300`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-300)
}

pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot.abs() / (na * nb)).clamp(0.0, 1.0).acos().to_degrees()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Jacobian assembled from one vjp per output entry, for any output shape.
pub fn vjp_jacobian<F: Differentiable>(f: &F, v: &Tensor) -> Matrix {
    let out = f.output_shape().to_vec();
    let n_out: usize = out.iter().product();
    let mut m = Matrix::zeros(n_out, v.len());
    for i in 0..n_out {
        let mut c = Tensor::zeros(&out);
        c.data_mut()[i] = 1.0;
        m.row_mut(i).copy_from_slice(f.vjp(v, &c).unwrap().data());
    }
    m
}
