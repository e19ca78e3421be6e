mod common;

use coreqn_core::model::BayesLinReg;
use coreqn_core::sampler::laplace_approximation;
use coreqn_core::{linalg, ModelSpec, WeightVector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn linreg(x: &DMatrix<f64>, y: &[f64], prior_var: f64, noise_var: f64) -> ModelSpec {
    let d = x.ncols();
    ModelSpec::BayesLinReg(BayesLinReg::new(x, y, DVector::from_element(d, 0.3), prior_var, noise_var).unwrap())
}

prop_compose! {
    fn regression_data()(n in 2usize..8, d in 1usize..4)
        (x in prop::collection::vec(-3.0f64..3.0, n * d),
         y in prop::collection::vec(-3.0f64..3.0, n),
         w in prop::collection::vec(0.0f64..4.0, n),
         shift in 0usize..8,
         n in Just(n), d in Just(d)) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, usize) {
        (DMatrix::from_row_slice(n, d, &x), y, w, shift % n)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_is_invariant_to_permuting_data((x, y, w, shift) in regression_data()) {
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let xp = DMatrix::from_fn(n, x.ncols(), |i, j| x[(perm[i], j)]);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let a = linreg(&x, &y, 2.0, 0.5)
            .conjugate_coreset_posterior(&WeightVector::new(n, (0..n).collect(), w).unwrap()).unwrap();
        let b = linreg(&xp, &yp, 2.0, 0.5)
            .conjugate_coreset_posterior(&WeightVector::new(n, (0..n).collect(), wp).unwrap()).unwrap();
        for (u, v) in a.mean.iter().zip(b.mean.iter()) {
            prop_assert!(close(*u, *v, 1e-10), "{u} vs {v}");
        }
        for (u, v) in a.covariance.iter().zip(b.covariance.iter()) {
            prop_assert!(close(*u, *v, 1e-10), "{u} vs {v}");
        }
    }

    #[test]
    fn unit_weights_give_the_full_posterior((x, y, _w, _s) in regression_data()) {
        let n = x.nrows();
        let d = x.ncols();
        let (pv, nv) = (2.0, 0.5);
        let model = linreg(&x, &y, pv, nv);
        let post = model.conjugate_coreset_posterior(&WeightVector::ones(n)).unwrap();
        let precision = DMatrix::identity(d, d) / pv + x.tr_mul(&x) / nv;
        let lin = DVector::from_element(d, 0.3) / pv + x.tr_mul(&DVector::from_column_slice(&y)) / nv;
        let cov = precision.clone().try_inverse().unwrap();
        let mean = &cov * lin;
        for (u, v) in post.mean.iter().zip(mean.iter()) {
            prop_assert!(close(*u, *v, 1e-12), "{u} vs {v}");
        }
        for (u, v) in post.covariance.iter().zip(cov.iter()) {
            prop_assert!(close(*u, *v, 1e-12), "{u} vs {v}");
        }
    }

    #[test]
    fn adding_weight_never_lowers_precision((x, y, w, k) in regression_data(), extra in 0.0f64..5.0) {
        let n = x.nrows();
        let model = linreg(&x, &y, 2.0, 0.5);
        let mut w2 = w.clone();
        w2[k] += extra;
        let p1 = model.conjugate_coreset_posterior(&WeightVector::new(n, (0..n).collect(), w).unwrap()).unwrap();
        let p2 = model.conjugate_coreset_posterior(&WeightVector::new(n, (0..n).collect(), w2).unwrap()).unwrap();
        let e1 = linalg::sym_eigenvalues(&linalg::spd_inverse(&p1.covariance).unwrap());
        let e2 = linalg::sym_eigenvalues(&linalg::spd_inverse(&p2.covariance).unwrap());
        for (a, b) in e1.iter().zip(&e2) {
            prop_assert!(*b >= *a - 1e-9 * a.abs().max(1.0), "{a} -> {b}");
        }
    }

    #[test]
    fn gaussian_location_precision_grows_with_weight(xs in prop::collection::vec(-5.0f64..5.0, 2..10), k in 0usize..10, extra in 0.0f64..5.0) {
        let n = xs.len();
        let model = common::model_1d(&xs, 1.5, 0.7);
        let w1 = vec![1.0; n];
        let mut w2 = w1.clone();
        w2[k % n] += extra;
        let v1 = model.conjugate_coreset_posterior(&WeightVector::new(n, (0..n).collect(), w1).unwrap()).unwrap().covariance[(0, 0)];
        let v2 = model.conjugate_coreset_posterior(&WeightVector::new(n, (0..n).collect(), w2).unwrap()).unwrap().covariance[(0, 0)];
        prop_assert!(1.0 / v2 >= 1.0 / v1);
    }
}

#[test]
fn laplace_matches_linear_regression_posterior() {
    let x = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
    let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
    let model = linreg(&x, &y, 2.0, 0.5);
    let w = WeightVector::ones(40);
    let exact = model.conjugate_coreset_posterior(&w).unwrap();
    let lap = laplace_approximation(&model, &w).unwrap();
    assert!((&lap.mean - &exact.mean).amax() <= 1e-8);
    assert!((&lap.covariance - &exact.covariance).amax() <= 1e-8);
}

#[test]
fn laplace_matches_gaussian_location_posterior_for_any_weights() {
    let model = common::gaussian_model(3, 50, 4, 1.0, 4.0, 10.0);
    let w = WeightVector::new(50, vec![1, 5, 9, 30], vec![3.0, 0.0, 11.5, 7.25]).unwrap();
    let exact = model.conjugate_coreset_posterior(&w).unwrap();
    let lap = laplace_approximation(&model, &w).unwrap();
    assert!((&lap.mean - &exact.mean).amax() <= 1e-8);
    assert!((&lap.covariance - &exact.covariance).amax() <= 1e-8);
}

#[test]
fn gaussian_location_full_posterior_by_hand() {
    let xs = [2.0, -1.0, 0.5, 4.0];
    let model = common::model_1d(&xs, 1.0, 2.0);
    let post = model.conjugate_coreset_posterior(&WeightVector::ones(4)).unwrap();
    let precision = 1.0 + 4.0 / 2.0;
    let mean = (xs.iter().sum::<f64>() / 2.0) / precision;
    assert!((post.mean[0] - mean).abs() < 1e-15);
    assert!((post.covariance[(0, 0)] - 1.0 / precision).abs() < 1e-15);
}
