mod common;

use common::*;
use fvinv::critical::{common_cokernel, critical_space, merge, principal_angles, MergeState};
use fvinv::fv::{run_fv, FvConfig};
use fvinv::linalg::{orthonormality_residual, qr, svd, Matrix};
use fvinv::metrics::{angular_distance, decompose, ssim};
use fvinv::objective::{closed_form_gradient, z_inverse, z_matrix};
use fvinv::optim::{lbfgs_refine, LbfgsConfig};
use fvinv::sampling::sample_objective;
use fvinv::solver::predict_objective;
use fvinv::*;
use proptest::prelude::*;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(n)
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn vjp_equals_cotangent_times_jacobian(seed in any::<u64>()) {
        let mut r = rng(seed);
        let act = if r.random_bool(0.5) { Layer::Relu } else { Layer::Sigmoid };
        let mut net = conv_net(6, 6, 2, 3, 2, act, &mut r);
        net = Network::new(vec![6, 6, 2], net.layers().iter().cloned().chain([Layer::Flatten]).collect()).unwrap();
        let v = uniform(&[6, 6, 2], 1.0, &mut r);
        let jac = vjp_jacobian(&net, &v);
        let c = Tensor::from_vec(gaussian_vec(jac.rows(), &mut r));
        let direct = net.vjp(&v, &c).unwrap();
        let via = jac.vec_mul(c.data());
        prop_assert!(rel_err(direct.data(), &via) < 1e-10);
    }

    #[test]
    fn network_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = conv_net(5, 5, 1, 2, 2, Layer::Sigmoid, &mut r);
        let v = uniform(&[5, 5, 1], 1.0, &mut r);
        prop_assert!(rel_err(vjp_jacobian(&net, &v).data(), fd_jacobian(&net, &v, 1e-6).data()) < 1e-4);
    }

    #[test]
    fn singular_values_survive_transpose(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7) {
        let m = random_matrix(rows, cols, &mut rng(seed));
        let a = svd(&m).unwrap().s;
        let b = svd(&m.transpose()).unwrap().s;
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + x));
        }
    }

    #[test]
    fn singular_values_match_nalgebra(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9) {
        let m = random_matrix(rows, cols, &mut rng(seed));
        let mut oracle: Vec<f64> = nalgebra::DMatrix::from_row_slice(rows, cols, m.data()).singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        let ours = svd(&m).unwrap();
        prop_assert_eq!(ours.s.len(), oracle.len());
        for (a, b) in ours.s.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + oracle[0]));
        }
        prop_assert!(ours.reconstruct().sub(&m).max_abs() < 1e-12);
    }

    #[test]
    fn orthonormal_columns_have_unit_singular_values(seed in any::<u64>(), n in 2usize..8) {
        let q = qr(&random_matrix(n + 2, n, &mut rng(seed))).0;
        prop_assert!(orthonormality_residual(&q) < 1e-12);
        let s = svd(&q).unwrap().s;
        prop_assert!((s[s.len() - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_to_argmax(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = Network::new(vec![4, 4, 1], vec![Layer::MaxPool2d { size: 2, stride: 2 }, Layer::Flatten]).unwrap();
        let v = uniform(&[4, 4, 1], 1.0, &mut r);
        let c = Tensor::from_vec(gaussian_vec(4, &mut r));
        let g = net.vjp(&v, &c).unwrap();
        for (w, cw) in c.data().iter().enumerate() {
            let (wy, wx) = (w / 2, w % 2);
            let cells: Vec<usize> = (0..4).map(|i| (2 * wy + i / 2) * 4 + 2 * wx + i % 2).collect();
            let arg = *cells.iter().max_by(|a, b| v.data()[**a].total_cmp(&v.data()[**b])).unwrap();
            for p in cells {
                prop_assert_eq!(g.data()[p], if p == arg { *cw } else { 0.0 });
            }
        }
    }

    #[test]
    fn parametrization_adjoint_pairing(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [ParamKind::Rgb, ParamKind::Fft, ParamKind::Ffte][kind];
        let mut r = rng(seed);
        let p = Parametrization::new(kind, 8, 4, 2).unwrap();
        let v = uniform(&[8, 4, 2], 1.0, &mut r);
        let c = uniform(&[8, 4, 2], 1.0, &mut r);
        let lhs = p.linear_part(&v).unwrap().dot(&c);
        let rhs = v.dot(&p.linear_part_adjoint(&c).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn parametrization_preimage_round_trip(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [ParamKind::Rgb, ParamKind::Fft, ParamKind::Ffte][kind];
        let mut r = rng(seed);
        let p = Parametrization::new(kind, 4, 8, 3).unwrap();
        let img = Tensor::new(vec![4, 8, 3], (0..96).map(|_| r.random_range(0.02..0.98)).collect()).unwrap();
        let back = p.apply(&p.preimage(&img).unwrap()).unwrap();
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-8);
    }

    #[test]
    fn z_is_symmetric_and_inverted_exactly(seed in any::<u64>(), n in 2usize..9, k in prop::sample::select(vec![0u32, 1, 2, 5, 50])) {
        let y = FeatureResponse::new(gaussian_vec(n, &mut rng(seed)));
        let z = z_matrix(&y, k).unwrap();
        prop_assert_eq!(z.clone(), z.transpose());
        let prod = z.matmul(&z_inverse(&y, k).unwrap()).unwrap();
        prop_assert!(prod.sub(&Matrix::identity(n)).max_abs() < 1e-12);
    }

    #[test]
    fn dropping_the_scalar_keeps_the_zero_set(seed in any::<u64>(), k in 0u32..6, force in any::<bool>()) {
        let mut r = rng(seed);
        let n = 4;
        let y = FeatureResponse::new(gaussian_vec(n, &mut r));
        let mut jm = random_matrix(n, 9, &mut r);
        let x = FeatureObjective::new(unit_vec(n, &mut r)).unwrap();
        let z = z_matrix(&y, k).unwrap();
        let u = z.mul_vec(x.as_slice());
        if force {
            let uu: f64 = u.iter().map(|v| v * v).sum();
            let ut = jm.vec_mul(&u);
            jm = Matrix::from_fn(n, 9, |i, j| jm[(i, j)] - u[i] * ut[j] / uu);
        }
        let jac = JacobianMatrix::new(jm).unwrap();
        let eval = closed_form_gradient(&x, &y, &jac, k).unwrap();
        prop_assume!(eval.q.abs() > 1e-2);
        let grad = eval.grad_row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let raw = jac.matrix().vec_mul(&u).iter().map(|v| v * v).sum::<f64>().sqrt();
        let factor = (k as f64 + 1.0) * eval.q.abs().powi(k as i32);
        prop_assert!((grad - factor * raw).abs() <= 1e-12 * (1.0 + grad));
        prop_assert_eq!(raw < 1e-10, force);
        prop_assert_eq!(grad < 1e-10, force);
    }

    #[test]
    fn prediction_is_scale_invariant_and_feasible(seed in any::<u64>(), n in 2usize..7, alpha in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let k = r.random_range(0..6);
        let y = FeatureResponse::new(gaussian_vec(n, &mut r));
        let jac = JacobianMatrix::new(random_matrix(n, 3 * n, &mut r)).unwrap();
        let d = r.random_range(1..=n);
        let c = SubspaceBasis::from_vectors(n, &(0..d).map(|_| gaussian_vec(n, &mut r)).collect::<Vec<_>>()).unwrap();
        let a = predict_objective(&y, &jac, k, &c).unwrap();
        let b = predict_objective(&y, &jac.scaled(alpha), k, &c).unwrap();
        prop_assume!(!a.multiplicity);
        let gap = a.singular_values.get(1).map_or(f64::INFINITY, |s1| (s1 - a.singular_values[0]) / a.singular_values[a.singular_values.len() - 1]);
        prop_assert!(angular_distance(&a.x_hat, &b.x_hat) < 1e-5, "{} deg, relative gap {}", angular_distance(&a.x_hat, &b.x_hat), gap);
        let zx = z_matrix(&y, k).unwrap().mul_vec(a.x_hat.as_slice());
        let p = c.project(&zx);
        prop_assert!(rel_err(&p, &zx) * zx.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn decomposition_leads_with_the_prediction(seed in any::<u64>(), n in 2usize..7) {
        let mut r = rng(seed);
        let k = r.random_range(0..4);
        let y = FeatureResponse::new(gaussian_vec(n, &mut r));
        let jac = JacobianMatrix::new(random_matrix(n, 2 * n, &mut r)).unwrap();
        let x = FeatureObjective::new(unit_vec(n, &mut r)).unwrap();
        let pred = predict_objective(&y, &jac, k, &SubspaceBasis::full(n)).unwrap();
        prop_assume!(!pred.multiplicity);
        let row = decompose(&x, &y, &jac, k).unwrap();
        let c0 = x.as_slice().iter().zip(pred.x_hat.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        prop_assert!((row.coefficients[0] - c0).abs() < 1e-10);
        let total: f64 = row.coefficients.iter().map(|c| c * c).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn critical_space_dim_is_monotone_in_rho(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 5;
        let jacs: Vec<JacobianMatrix> = (0..4)
            .map(|_| {
                let scales: Vec<f64> = (0..n).map(|_| 10f64.powf(r.random_range(-6.0..0.0))).collect();
                let m = random_matrix(n, 8, &mut r);
                JacobianMatrix::new(Matrix::from_fn(n, 8, |i, j| scales[i] * m[(i, j)])).unwrap()
            })
            .collect();
        let mut last = n;
        for i in 1..40 {
            let rho = 10f64.powf(-7.0 + 7.0 * i as f64 / 40.0).min(0.999);
            let d = critical_space(&jacs, rho).unwrap().dim();
            prop_assert!(d <= last, "dim grew from {} to {} at rho {}", last, d, rho);
            last = d;
        }
    }

    #[test]
    fn exact_common_kernel_is_recovered_in_any_order(seed in any::<u64>(), kdim in 1usize..3) {
        let mut r = rng(seed);
        let n = 5;
        let kern = SubspaceBasis::from_vectors(n, &(0..kdim).map(|_| gaussian_vec(n, &mut r)).collect::<Vec<_>>()).unwrap();
        let perp = kern.complement();
        let mut jacs: Vec<JacobianMatrix> = (0..5)
            .map(|_| {
                // singular values in [1, 2] on the complement, zero on the kernel
                let q = qr(&random_matrix(n - kdim, n - kdim, &mut r)).0;
                let w = qr(&random_matrix(12, n - kdim, &mut r)).0;
                let s: Vec<f64> = (0..n - kdim).map(|_| r.random_range(1.0..2.0)).collect();
                let core = Matrix::from_fn(n - kdim, 12, |i, j| (0..n - kdim).map(|l| q[(i, l)] * s[l] * w[(j, l)]).sum());
                JacobianMatrix::new(perp.basis().matmul(&core).unwrap()).unwrap()
            })
            .collect();
        let rho = 10f64.powf(r.random_range(-7.9..-0.31));
        let a = critical_space(&jacs, rho).unwrap();
        jacs.reverse();
        let b = critical_space(&jacs, rho).unwrap();
        for c in [a, b] {
            let pa = principal_angles(&c, &perp).unwrap();
            prop_assert_eq!(c.dim(), n - kdim);
            prop_assert!(pa.angles.iter().all(|t| t.to_radians() < 1e-8), "{:?}", pa.angles);
        }
    }

    #[test]
    fn merging_equal_subspaces_accumulates_weight(seed in any::<u64>(), copies in 1usize..6) {
        let mut r = rng(seed);
        let s = SubspaceBasis::from_vectors(4, &[gaussian_vec(4, &mut r), gaussian_vec(4, &mut r)]).unwrap();
        let mut state = MergeState::new(s.clone());
        for _ in 1..copies {
            state = merge(&state, &MergeState::new(s.clone())).unwrap();
        }
        prop_assert_eq!(state.weight, copies);
        let pa = principal_angles(&state.basis, &s).unwrap();
        prop_assert!(pa.angles.iter().all(|t| *t < 1e-6));
        let jac = JacobianMatrix::new(Matrix::zeros(4, 3)).unwrap();
        prop_assert_eq!(common_cokernel(&vec![jac; copies], 0.5).unwrap().weight, copies);
    }

    #[test]
    fn angular_distance_is_a_pseudometric(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let a = FeatureObjective::new(unit_vec(n, &mut r)).unwrap();
        let b = FeatureObjective::new(unit_vec(n, &mut r)).unwrap();
        let c = FeatureObjective::new(unit_vec(n, &mut r)).unwrap();
        let neg = FeatureObjective::new(a.as_slice().iter().map(|v| -v).collect()).unwrap();
        prop_assert_eq!(angular_distance(&a, &b), angular_distance(&b, &a));
        prop_assert!(angular_distance(&a, &neg) < 1e-5);
        prop_assert!(angular_distance(&a, &a) < 1e-5);
        prop_assert!((0.0..=90.0).contains(&angular_distance(&a, &b)));
        prop_assert!(angular_distance(&a, &c) <= angular_distance(&a, &b) + angular_distance(&b, &c) + 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_offset_stable(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut img = || Tensor::new(vec![10, 9, 2], (0..180).map(|_| r.random_range(0.2..0.7)).collect::<Vec<f64>>()).unwrap();
        let (a, b) = (img(), img());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-14);
        let shift = |t: &Tensor| t.map(|v| v + 0.25);
        prop_assert!((ssim(&shift(&a), &shift(&b)).unwrap() - ssim(&a, &b).unwrap()).abs() < 0.05);
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn sampled_objectives_are_unit_and_nonnegative(seed in any::<u64>(), n in 2usize..12) {
        let s = sample_objective(n, &mut rng(seed)).unwrap();
        prop_assert!(s.x.as_slice().iter().all(|v| *v >= 0.0));
        let norm: f64 = s.x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(cases(6))]

    #[test]
    fn fv_is_deterministic(seed in 0u64..1000) {
        let mut r = rng(seed);
        let net = conv_net(8, 8, 1, 2, 3, Layer::Relu, &mut r);
        let pipe = FeaturePipeline::new(Parametrization::new(ParamKind::Fft, 8, 8, 1).unwrap(), net, Aggregation::Mean).unwrap();
        let fv = FvConfig { adam_steps: 30, lbfgs_steps: 10, seed, ..FvConfig::default() };
        let x = FeatureObjective::new(unit_vec(3, &mut r)).unwrap();
        prop_assert_eq!(run_fv(&pipe, &x, 2, &fv).unwrap(), run_fv(&pipe, &x, 2, &fv).unwrap());
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn lbfgs_trace_never_increases(seed in any::<u64>(), n in 2usize..12) {
        let mut r = rng(seed);
        let a = random_matrix(n, n, &mut r);
        let center = gaussian_vec(n, &mut r);
        let f = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&center).map(|(p, q)| p - q).collect();
            let ad = a.mul_vec(&d);
            let quad: f64 = ad.iter().map(|v| v * v).sum::<f64>() + d.iter().map(|v| v.powi(4)).sum::<f64>();
            let mut g = a.vec_mul(&ad);
            g.iter_mut().zip(&d).for_each(|(g, d)| *g = 2.0 * *g + 4.0 * d.powi(3));
            Ok((quad, g))
        };
        let out = lbfgs_refine(vec![0.0; n], f, &LbfgsConfig { max_steps: 50, ..LbfgsConfig::default() }).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn smooth_toy_fv_reaches_a_stationary_point() {
    let mut r = rng(5);
    let net = Network::new(
        vec![4, 4, 1],
        vec![Layer::Flatten, Layer::Dense { weight: uniform(&[3, 16], 0.5, &mut r) }, Layer::Sigmoid],
    )
    .unwrap();
    let pipe = FeaturePipeline::new(Parametrization::new(ParamKind::Fft, 4, 4, 1).unwrap(), net, Aggregation::Identity).unwrap();
    for i in 0..3 {
        let x = FeatureObjective::new(unit_vec(3, &mut r).iter().map(|v| v.abs()).collect()).unwrap();
        let fv = FvConfig { adam_steps: 200, lbfgs_steps: 300, seed: i, ..FvConfig::default() };
        let out = run_fv(&pipe, &x, 2, &fv).unwrap();
        assert!(out.grad_norm_at_opt < 1e-5 * (1.0 + out.final_value.abs()), "{} at S = {}", out.grad_norm_at_opt, out.final_value);
    }
}
