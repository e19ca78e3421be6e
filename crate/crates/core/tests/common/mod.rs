#![allow(dead_code)]

use coreqn_core::model::GaussianLocation;
use coreqn_core::rng::rng_from_seed;
use coreqn_core::{ModelSpec, WeightVector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian location model with prior `N(0, prior_var I)` on data
/// `x_n ~ N(mu, noise_var I)`, `mu ~ N(0, mean_var I)`.
pub fn gaussian_model(seed: u64, n: usize, d: usize, prior_var: f64, noise_var: f64, mean_var: f64) -> ModelSpec {
    let mut rng = rng_from_seed(seed);
    let mu: Vec<f64> = (0..d).map(|_| mean_var.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = mu[j] + noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    ModelSpec::GaussianLocation(GaussianLocation::new(DVector::zeros(d), prior_var, noise_var, &x).unwrap())
}

pub fn model_1d(xs: &[f64], prior_var: f64, noise_var: f64) -> ModelSpec {
    let x = DMatrix::from_column_slice(xs.len(), 1, xs);
    ModelSpec::GaussianLocation(GaussianLocation::new(DVector::zeros(1), prior_var, noise_var, &x).unwrap())
}

fn as_gaussian(model: &ModelSpec) -> &GaussianLocation {
    match model {
        ModelSpec::GaussianLocation(g) => g,
        _ => panic!("not a Gaussian location model"),
    }
}

fn post(g: &GaussianLocation, ws: &[(usize, f64)]) -> (DVector<f64>, f64) {
    let total: f64 = ws.iter().map(|p| p.1).sum();
    let s = 1.0 / (1.0 / g.prior_var() + total / g.noise_var());
    let mut lin = g.prior_mean() / g.prior_var();
    for &(n, wn) in ws {
        for (l, x) in lin.iter_mut().zip(g.row(n)) {
            *l += wn * x / g.noise_var();
        }
    }
    (lin * s, s)
}

/// Analytic gradient of `KL(pi_w || pi)` with respect to the supported weights.
pub fn analytic_kl_gradient(model: &ModelSpec, w: &WeightVector) -> DVector<f64> {
    let g = as_gaussian(model);
    let n = model.num_data();
    let d = model.dim() as f64;
    let pairs: Vec<(usize, f64)> = w.support().iter().copied().zip(w.values().iter().copied()).collect();
    let all: Vec<(usize, f64)> = (0..n).map(|i| (i, 1.0)).collect();
    let (mw, sw) = post(g, &pairs);
    let (m1, s1) = post(g, &all);
    let ds = -sw * sw / g.noise_var();
    DVector::from_fn(w.len(), |k, _| {
        let i = w.support()[k];
        let xi = DVector::from_column_slice(g.row(i));
        let dm = (&xi - &mw) * (sw / g.noise_var());
        0.5 * d * ds * (1.0 / s1 - 1.0 / sw) + (&mw - &m1).dot(&dm) / s1
    })
}

/// Central finite differences of the closed-form KL, step `1e-5 max(|w_i|, 1)`.
pub fn fd_kl_gradient(model: &ModelSpec, w: &WeightVector) -> DVector<f64> {
    let base = w.values_vector();
    DVector::from_fn(w.len(), |i, _| {
        let h = 1e-5 * base[i].abs().max(1.0);
        let mut p = base.clone();
        p[i] += h;
        let mut q = base.clone();
        q[i] -= h;
        let kp = coreqn_core::oracle::coreset_kl(model, &w.with_values(p.iter().copied().collect()).unwrap()).unwrap();
        let kq = coreqn_core::oracle::coreset_kl(model, &w.with_values(q.iter().copied().collect()).unwrap()).unwrap();
        (kp - kq) / (2.0 * h)
    })
}
