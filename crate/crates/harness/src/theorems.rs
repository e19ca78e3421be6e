use std::fmt::Write as _;
use std::time::Instant;

use coreqn_core::model::GaussianLocation;
use coreqn_core::oracle::{coreset_kl, feasibility_coreset_size, solve_exact_weights, verify_convergence_theorem};
use coreqn_core::rng::derive_seed;
use coreqn_core::{uniform_subsample, ModelSpec};
use nalgebra::DVector;
use serde::Serialize;

use crate::data::generate_synthetic_gaussian;
use crate::error::Result;

pub const NUM_SEEDS: u64 = 10;

/// Zero-KL coreset existence: d = 10, N = 10^4, M = 3 (d + 1) ceil(ln N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExistenceSetup {
    pub n: usize,
    pub d: usize,
    pub prior_var: f64,
    pub data_mean_var: f64,
    pub noise_var: f64,
    pub kl_tol: f64,
    pub min_passing: usize,
}

impl Default for ExistenceSetup {
    fn default() -> Self {
        Self { n: 10_000, d: 10, prior_var: 1.0, data_mean_var: 100.0, noise_var: 100.0, kl_tol: 1e-8, min_passing: 9 }
    }
}

/// Linear convergence of exact-moment Newton steps towards the zero-KL set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionSetup {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub prior_var: f64,
    pub data_mean_var: f64,
    pub noise_var: f64,
    pub gamma: f64,
    pub tau: f64,
    pub steps: usize,
    pub ratio_tol: f64,
}

impl Default for ContractionSetup {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 5,
            m: 50,
            prior_var: 1.0,
            data_mean_var: 100.0,
            noise_var: 1e5,
            gamma: 1.0,
            tau: 1e-8,
            steps: 20,
            ratio_tol: 1.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExistenceResult {
    pub seed: u64,
    pub m: usize,
    pub feasible: bool,
    pub residual: f64,
    pub kl: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionResult {
    pub seed: u64,
    pub xi: f64,
    pub max_ratio: f64,
    pub final_distance: f64,
    pub error: Option<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub existence_setup: ExistenceSetup,
    pub existence: Vec<ExistenceResult>,
    pub existence_time_s: f64,
    pub contraction_setup: ContractionSetup,
    pub contraction: Vec<ContractionResult>,
    pub contraction_time_s: f64,
}

fn gaussian_model(n: usize, d: usize, prior_var: f64, data_mean_var: f64, noise_var: f64, seed: u64) -> Result<ModelSpec> {
    let (x, _) = generate_synthetic_gaussian(n, d, data_mean_var, noise_var, seed);
    Ok(ModelSpec::GaussianLocation(GaussianLocation::new(DVector::zeros(d), prior_var, noise_var, &x)?))
}

pub fn check_existence(setup: &ExistenceSetup, seed: u64) -> Result<ExistenceResult> {
    let model = gaussian_model(
        setup.n,
        setup.d,
        setup.prior_var,
        setup.data_mean_var,
        setup.noise_var,
        derive_seed(seed, 0, "existence-data"),
    )?;
    let m = feasibility_coreset_size(setup.d, setup.n);
    let support = uniform_subsample(setup.n, m, derive_seed(seed, 0, "existence-support"))?;
    let exact = solve_exact_weights(&model, &support)?;
    let kl = coreset_kl(&model, &exact.weights)?;
    let pass = exact.feasible && kl <= setup.kl_tol;
    Ok(ExistenceResult { seed, m, feasible: exact.feasible, residual: exact.residual, kl, pass })
}

pub fn check_contraction(setup: &ContractionSetup, seed: u64) -> Result<ContractionResult> {
    let model = gaussian_model(
        setup.n,
        setup.d,
        setup.prior_var,
        setup.data_mean_var,
        setup.noise_var,
        derive_seed(seed, 0, "contraction-data"),
    )?;
    let support = uniform_subsample(setup.n, setup.m, derive_seed(seed, 0, "contraction-support"))?;
    Ok(match verify_convergence_theorem(&model, &support, setup.gamma, setup.tau, setup.steps) {
        Ok(r) => {
            let max_ratio = r.max_ratio();
            ContractionResult {
                seed,
                xi: r.xi,
                max_ratio,
                final_distance: *r.distances.last().unwrap_or(&f64::NAN),
                error: None,
                pass: max_ratio <= setup.ratio_tol,
            }
        }
        Err(e) => ContractionResult {
            seed,
            xi: f64::NAN,
            max_ratio: f64::NAN,
            final_distance: f64::NAN,
            error: Some(e.to_string()),
            pass: false,
        },
    })
}

/// Runs both checks on `NUM_SEEDS` seeds derived from `seed`.
pub fn verify_theorems(seed: u64) -> Result<TheoremReport> {
    let existence_setup = ExistenceSetup::default();
    let contraction_setup = ContractionSetup::default();
    let t0 = Instant::now();
    let existence = (0..NUM_SEEDS)
        .map(|i| check_existence(&existence_setup, derive_seed(seed, i, "existence")))
        .collect::<Result<Vec<_>>>()?;
    let existence_time_s = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let contraction = (0..NUM_SEEDS)
        .map(|i| check_contraction(&contraction_setup, derive_seed(seed, i, "contraction")))
        .collect::<Result<Vec<_>>>()?;
    let contraction_time_s = t0.elapsed().as_secs_f64();
    Ok(TheoremReport { existence_setup, existence, existence_time_s, contraction_setup, contraction, contraction_time_s })
}

impl TheoremReport {
    pub fn existence_passes(&self) -> usize {
        self.existence.iter().filter(|r| r.pass).count()
    }
    pub fn contraction_passes(&self) -> usize {
        self.contraction.iter().filter(|r| r.pass).count()
    }
    pub fn existence_ok(&self) -> bool {
        self.existence_passes() >= self.existence_setup.min_passing
    }
    pub fn contraction_ok(&self) -> bool {
        self.contraction_passes() == self.contraction.len()
    }
    pub fn ok(&self) -> bool {
        self.existence_ok() && self.contraction_ok()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let e = &self.existence_setup;
        let m = feasibility_coreset_size(e.d, e.n);
        let _ = writeln!(s, "zero-KL coreset: d={} N={} M={} (KL <= {:e})", e.d, e.n, m, e.kl_tol);
        for r in &self.existence {
            let _ = writeln!(
                s,
                "  seed {:>20}  feasible={:<5} residual={:.3e} kl={:.3e} {}",
                r.seed,
                r.feasible,
                r.residual,
                r.kl,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "  {}/{} seeds pass (need {}), {:.2}s: {}",
            self.existence_passes(),
            self.existence.len(),
            e.min_passing,
            self.existence_time_s,
            if self.existence_ok() { "PASS" } else { "FAIL" }
        );
        let c = &self.contraction_setup;
        let _ = writeln!(
            s,
            "contraction: d={} N={} M={} gamma={} tau={:e} steps={} (ratio <= {})",
            c.d, c.n, c.m, c.gamma, c.tau, c.steps, c.ratio_tol
        );
        for r in &self.contraction {
            match &r.error {
                None => {
                    let _ = writeln!(
                        s,
                        "  seed {:>20}  xi={:.4} max_ratio={:.6} final_dist={:.3e} {}",
                        r.seed,
                        r.xi,
                        r.max_ratio,
                        r.final_distance,
                        if r.pass { "PASS" } else { "FAIL" }
                    );
                }
                Some(err) => {
                    let _ = writeln!(s, "  seed {:>20}  error: {err} FAIL", r.seed);
                }
            }
        }
        let _ = writeln!(
            s,
            "  {}/{} seeds pass, {:.2}s: {}",
            self.contraction_passes(),
            self.contraction.len(),
            self.contraction_time_s,
            if self.contraction_ok() { "PASS" } else { "FAIL" }
        );
        s
    }
}
