mod common;

use coreqn_core::oracle::{exact_moments_gaussian, ExactGaussianMoments};
use coreqn_core::rng::rng_from_seed;
use coreqn_core::sampler::DefaultSampler;
use coreqn_core::{
    run_qnc, run_qnc_on_support, uniform_subsample, MomentSource, MonteCarloMoments, QncConfig, WeightVector,
};
use rand::Rng;

fn mc() -> MonteCarloMoments<DefaultSampler> {
    MonteCarloMoments { sampler: DefaultSampler::default() }
}

fn random_weights(n: usize, m: usize, seed: u64) -> WeightVector {
    let mut rng = rng_from_seed(seed ^ 0xabcd);
    let support = uniform_subsample(n, m, seed).unwrap();
    let scale = n as f64 / m as f64;
    let vals = (0..m).map(|_| scale * rng.random_range(0.0..2.0)).collect();
    WeightVector::new(n, support, vals).unwrap()
}

#[test]
fn exact_negative_hw_is_the_analytic_kl_gradient() {
    let model = common::gaussian_model(7, 300, 4, 1.0, 9.0, 16.0);
    for seed in 0..50 {
        let w = random_weights(300, 12, seed);
        let exact = exact_moments_gaussian(&model, &w).unwrap();
        let analytic = common::analytic_kl_gradient(&model, &w);
        let err = (&analytic + &exact.hw_hat).norm() / analytic.norm();
        assert!(err <= 1e-8, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn exact_gradient_matches_finite_differences() {
    let model = common::gaussian_model(8, 200, 2, 1.0, 4.0, 9.0);
    for seed in 0..5 {
        let w = random_weights(200, 10, seed);
        let exact = exact_moments_gaussian(&model, &w).unwrap();
        let fd = common::fd_kl_gradient(&model, &w);
        let err = (&fd + &exact.hw_hat).norm() / fd.norm();
        assert!(err <= 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn monte_carlo_g_is_within_ten_percent_at_ten_thousand_draws() {
    let model = common::gaussian_model(3, 500, 3, 1.0, 100.0, 100.0);
    let w = coreqn_core::unif_baseline(500, 10, 4).unwrap();
    let exact = exact_moments_gaussian(&model, &w).unwrap();
    let est = mc().moments(&model, &w, 10_000, 9).unwrap();
    let err = (&est.g_hat - &exact.g_hat).norm() / exact.g_hat.norm();
    assert!(err <= 0.1, "relative Frobenius error {err}");
}

#[test]
fn monte_carlo_moments_agree_with_exact_at_a_million_draws() {
    let model = common::gaussian_model(5, 100, 2, 1.0, 4.0, 25.0);
    let w = random_weights(100, 5, 2);
    let exact = exact_moments_gaussian(&model, &w).unwrap();
    let est = mc().moments(&model, &w, 1_000_000, 6).unwrap();
    let g_err = (&est.g_hat - &exact.g_hat).norm() / exact.g_hat.norm();
    let h_err = (&est.hw_hat - &exact.hw_hat).norm() / exact.hw_hat.norm();
    assert!(g_err <= 0.01, "G relative error {g_err}");
    assert!(h_err <= 0.01, "Hw relative error {h_err}");
}

#[test]
fn three_point_example_converges_to_equal_weights() {
    let model = common::model_1d(&[1.0, 2.0, 3.0], 1.0, 1.0);
    let config = QncConfig { max_iters: 30, gamma: 1.0, tau: 1e-8, stop_patience: 30, ..QncConfig::default() };
    let (w, trace) = run_qnc_on_support(&model, &ExactGaussianMoments, &config, &[0, 2]).unwrap();
    assert!(trace.len() <= 30);
    for &v in w.values() {
        assert!((v - 1.5).abs() <= 1e-6, "{:?}", w.values());
    }
}

#[test]
fn exact_mode_runs_are_bitwise_identical() {
    let model = common::gaussian_model(1, 400, 3, 1.0, 100.0, 100.0);
    let config = QncConfig { coreset_size: 30, seed: 17, ..QncConfig::default() };
    let (wa, ta) = run_qnc(&model, &ExactGaussianMoments, &config).unwrap();
    let (wb, tb) = run_qnc(&model, &ExactGaussianMoments, &config).unwrap();
    assert_eq!(wa.support(), wb.support());
    let bits = |w: &WeightVector| w.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&wa), bits(&wb));
    assert_eq!(ta.len(), tb.len());
    for (a, b) in ta.records.iter().zip(&tb.records) {
        assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        assert_eq!(a.step_norm.to_bits(), b.step_norm.to_bits());
        assert_eq!(a.gamma.to_bits(), b.gamma.to_bits());
        assert_eq!(a.line_search, b.line_search);
    }
}

#[test]
fn monte_carlo_runs_are_reproducible() {
    let model = common::gaussian_model(2, 300, 2, 1.0, 100.0, 100.0);
    let config = QncConfig { coreset_size: 20, num_samples: 200, max_iters: 5, seed: 3, ..QncConfig::default() };
    let (wa, _) = run_qnc(&model, &mc(), &config).unwrap();
    let (wb, _) = run_qnc(&model, &mc(), &config).unwrap();
    assert_eq!(wa, wb);
}

#[test]
fn gradient_norm_does_not_grow_on_the_gaussian_benchmark() {
    let mut ok = 0;
    for seed in 0..10 {
        let model = common::gaussian_model(100 + seed, 5000, 5, 1.0, 100.0, 100.0);
        let config = QncConfig { coreset_size: 50, seed, ..QncConfig::default() };
        let (_, trace) = run_qnc(&model, &mc(), &config).unwrap();
        let first = trace.records.first().unwrap().grad_norm;
        let last = trace.records.last().unwrap().grad_norm;
        if last <= first {
            ok += 1;
        }
    }
    assert!(ok >= 9, "{ok}/10 seeds");
}
