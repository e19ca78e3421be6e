//! Draws from coreset posteriors `pi_w`.
//!
//! Conjugate models are sampled exactly (Cholesky transform of standard
//! normals). Everything else goes through a fixed-length HMC sampler whose
//! step size is tuned by dual averaging during warmup and then frozen.
//! Only the support of `w` is ever evaluated, so a leapfrog step costs
//! `O(|supp w| P)` rather than `O(N P)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::coreset::WeightVector;
use crate::error::{Error, Result};
use crate::gaussian::GaussianDistribution;
use crate::linalg;
use crate::model::ModelSpec;
use crate::rng::rng_from_seed;

/// Draws from one posterior, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub draws: DMatrix<f64>,
    /// Fraction of accepted HMC proposals after warmup; 1.0 for exact samplers.
    pub acceptance_rate: f64,
    pub seed_used: u64,
}

impl SampleBatch {
    pub fn new(draws: DMatrix<f64>, acceptance_rate: f64, seed_used: u64) -> Result<Self> {
        if draws.nrows() < 2 {
            return Err(Error::InvalidArgument(format!("a sample batch needs at least 2 draws, got {}", draws.nrows())));
        }
        if let Some(i) = draws.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite draw in row {}", i % draws.nrows())));
        }
        if !(0.0..=1.0).contains(&acceptance_rate) {
            return Err(Error::InvalidArgument(format!("acceptance rate {acceptance_rate} outside [0, 1]")));
        }
        Ok(Self { draws, acceptance_rate, seed_used })
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub warmup_steps: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub initial_step_size: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { warmup_steps: 500, leapfrog_steps: 20, target_accept: 0.8, initial_step_size: 0.1 }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::InvalidArgument("warmup_steps must be >= 1".into()));
        }
        if self.leapfrog_steps < 1 {
            return Err(Error::InvalidArgument("leapfrog_steps must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument("target_accept must lie in (0, 1)".into()));
        }
        if !(self.initial_step_size.is_finite() && self.initial_step_size > 0.0) {
            return Err(Error::InvalidArgument("initial_step_size must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized log-density with gradient.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Returns `log p(theta)` and writes its gradient into `grad`.
    fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// `log pi_0 + sum_{n in supp w} w_n f_n`.
pub struct CoresetTarget<'a> {
    pub model: &'a ModelSpec,
    pub weights: &'a WeightVector,
}

impl LogDensity for CoresetTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.model.coreset_log_density(self.weights, theta, grad)
    }
}

/// The full-data posterior `pi = pi_1`.
pub struct FullTarget<'a>(pub &'a ModelSpec);

impl LogDensity for FullTarget<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.0.full_log_density(theta, grad)
    }
}

/// Dual-averaging step-size adaptation toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(initial_step: f64, target_accept: f64) -> Self {
        Self {
            mu: (10.0 * initial_step).ln(),
            target: target_accept,
            h_bar: 0.0,
            log_step: initial_step.ln(),
            log_step_bar: 0.0,
            t: 0.0,
        }
    }

    /// Feed one acceptance probability; returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let eta = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_step = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.t.powf(-Self::KAPPA);
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar;
        self.log_step.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size used once warmup ends.
    pub fn final_step(&self) -> f64 {
        if self.t == 0.0 {
            self.current()
        } else {
            self.log_step_bar.exp()
        }
    }
}

/// Step sizes produced by dual averaging over a sequence of acceptance
/// probabilities.
pub fn adapt_step_size(initial_step: f64, target_accept: f64, accept_history: &[f64]) -> Vec<f64> {
    let mut da = DualAveraging::new(initial_step, target_accept);
    accept_history.iter().map(|&a| da.update(a)).collect()
}

struct Leapfrog<'a, T: LogDensity> {
    target: &'a T,
    grad_buf: Vec<f64>,
}

impl<T: LogDensity> Leapfrog<'_, T> {
    /// Runs `steps` leapfrog steps in place; returns the final log-density.
    fn run(&mut self, theta: &mut [f64], p: &mut [f64], grad: &mut [f64], eps: f64, steps: usize) -> f64 {
        let mut lp = f64::NAN;
        for _ in 0..steps {
            for (pi, g) in p.iter_mut().zip(grad.iter()) {
                *pi += 0.5 * eps * g;
            }
            for (t, pi) in theta.iter_mut().zip(p.iter()) {
                *t += eps * pi;
            }
            lp = self.target.log_density(theta, &mut self.grad_buf);
            grad.copy_from_slice(&self.grad_buf);
            for (pi, g) in p.iter_mut().zip(grad.iter()) {
                *pi += 0.5 * eps * g;
            }
            if !lp.is_finite() {
                break;
            }
        }
        lp
    }
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// Change in the Hamiltonian over one trajectory of `steps` leapfrog steps,
/// starting from `theta` with momentum `p`.
pub fn leapfrog_energy_error<T: LogDensity>(target: &T, theta: &[f64], p: &[f64], eps: f64, steps: usize) -> f64 {
    let d = target.dim();
    let mut grad = vec![0.0; d];
    let lp0 = target.log_density(theta, &mut grad);
    let h0 = -lp0 + kinetic(p);
    let mut th = theta.to_vec();
    let mut mom = p.to_vec();
    let mut lf = Leapfrog { target, grad_buf: vec![0.0; d] };
    let lp1 = lf.run(&mut th, &mut mom, &mut grad, eps, steps);
    (-lp1 + kinetic(&mom)) - h0
}

const MAX_HALVINGS: usize = 10;

/// Fixed-trajectory HMC with identity mass matrix. Draws are deterministic
/// given `seed`.
pub fn hmc_sample<T: LogDensity>(
    target: &T,
    init: &[f64],
    config: &HmcConfig,
    num_draws: usize,
    seed: u64,
) -> Result<SampleBatch> {
    config.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: init.len() });
    }
    let mut rng = rng_from_seed(seed);
    let mut theta = init.to_vec();
    let mut grad = vec![0.0; d];
    let mut lp = target.log_density(&theta, &mut grad);
    if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::SamplerFailure("log-density is not finite at the initial point".into()));
    }

    let mut lf = Leapfrog { target, grad_buf: vec![0.0; d] };
    let mut p = vec![0.0; d];
    let mut prop = vec![0.0; d];
    let mut prop_grad = vec![0.0; d];

    let initial = find_initial_step(&mut lf, &theta, &grad, lp, config.initial_step_size, &mut rng);
    let mut da = DualAveraging::new(initial, config.target_accept);
    let mut frozen = initial;

    let mut draws = DMatrix::zeros(num_draws, d);
    let mut accepted = 0usize;
    let total = config.warmup_steps + num_draws;

    for iter in 0..total {
        let warm = iter < config.warmup_steps;
        let base = if warm { da.current() } else { frozen * rng.random_range(0.9..1.1) };

        let mut attempt = 0;
        let (accept_prob, new_lp) = loop {
            let eps = base * 0.5f64.powi(attempt as i32);
            for v in p.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let h0 = -lp + kinetic(&p);
            prop.copy_from_slice(&theta);
            prop_grad.copy_from_slice(&grad);
            let new_lp = lf.run(&mut prop, &mut p, &mut prop_grad, eps, config.leapfrog_steps);
            let h1 = -new_lp + kinetic(&p);
            if h1.is_finite() {
                break ((h0 - h1).exp().min(1.0), new_lp);
            }
            if warm {
                da.update(0.0);
            }
            attempt += 1;
            if attempt > MAX_HALVINGS {
                return Err(Error::SamplerFailure(format!(
                    "non-finite energy after {MAX_HALVINGS} step-size halvings (iteration {iter}, step {base:.3e}, lp {lp:.6e})"
                )));
            }
        };

        let accept = rng.random::<f64>() < accept_prob;
        if accept {
            theta.copy_from_slice(&prop);
            grad.copy_from_slice(&prop_grad);
            lp = new_lp;
        }
        if warm {
            da.update(accept_prob);
            if iter + 1 == config.warmup_steps {
                frozen = da.final_step();
            }
        } else {
            if accept {
                accepted += 1;
            }
            draws.row_mut(iter - config.warmup_steps).copy_from_slice(&theta);
        }
    }
    let rate = if num_draws > 0 { accepted as f64 / num_draws as f64 } else { 0.0 };
    SampleBatch::new(draws, rate, seed)
}

/// Doubles or halves the step until the one-step acceptance probability
/// crosses 1/2.
fn find_initial_step<T: LogDensity, R: Rng>(
    lf: &mut Leapfrog<'_, T>,
    theta: &[f64],
    grad: &[f64],
    lp: f64,
    start: f64,
    rng: &mut R,
) -> f64 {
    let d = theta.len();
    let mut eps = start;
    let mut p: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let h0 = -lp + kinetic(&p);
    let mut accept_at = |eps: f64, p: &mut Vec<f64>| {
        let mut th = theta.to_vec();
        let mut g = grad.to_vec();
        let mut mom = p.clone();
        let l = lf.run(&mut th, &mut mom, &mut g, eps, 1);
        let h1 = -l + kinetic(&mom);
        if h1.is_finite() {
            (h0 - h1).exp().min(1.0)
        } else {
            0.0
        }
    };
    let a0 = accept_at(eps, &mut p);
    let up = a0 > 0.5;
    for _ in 0..50 {
        let a = accept_at(eps, &mut p);
        if up != (a > 0.5) {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
        if !(1e-12..=1e6).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e6)
}

/// Draws `num_draws` samples from `pi_w`: exactly for conjugate models,
/// otherwise by HMC started at the Laplace mode (or the origin if the mode
/// cannot be found).
pub fn sample_coreset_posterior(
    model: &ModelSpec,
    w: &WeightVector,
    num_draws: usize,
    seed: u64,
    config: &HmcConfig,
) -> Result<SampleBatch> {
    if num_draws < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 draws, got {num_draws}")));
    }
    if w.full_dim() != model.num_data() {
        return Err(Error::DimensionMismatch { expected: model.num_data(), got: w.full_dim() });
    }
    if model.is_conjugate() {
        let post = model.conjugate_coreset_posterior(w)?;
        let draws = post.sample(num_draws, &mut rng_from_seed(seed))?;
        return SampleBatch::new(draws, 1.0, seed);
    }
    let target = CoresetTarget { model, weights: w };
    let init = find_mode(&target, model.dim()).map(|m| m.mode).unwrap_or_else(|_| DVector::zeros(model.dim()));
    hmc_sample(&target, init.as_slice(), config, num_draws, seed)
}

/// Draws from the full-data posterior `pi`.
pub fn sample_full_posterior(model: &ModelSpec, num_draws: usize, seed: u64, config: &HmcConfig) -> Result<SampleBatch> {
    if model.is_conjugate() {
        return sample_coreset_posterior(model, &WeightVector::ones(model.num_data()), num_draws, seed, config);
    }
    if num_draws < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 draws, got {num_draws}")));
    }
    let target = FullTarget(model);
    let init = find_mode(&target, model.dim()).map(|m| m.mode).unwrap_or_else(|_| DVector::zeros(model.dim()));
    hmc_sample(&target, init.as_slice(), config, num_draws, seed)
}

/// Source of posterior draws for the optimizer.
pub trait PosteriorSampler: Sync {
    fn sample(&self, model: &ModelSpec, w: &WeightVector, num_draws: usize, seed: u64) -> Result<SampleBatch>;
}

/// Exact draws for conjugate models, HMC otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultSampler {
    pub hmc: HmcConfig,
}

impl PosteriorSampler for DefaultSampler {
    fn sample(&self, model: &ModelSpec, w: &WeightVector, num_draws: usize, seed: u64) -> Result<SampleBatch> {
        sample_coreset_posterior(model, w, num_draws, seed, &self.hmc)
    }
}

const LAPLACE_MAX_ITERS: usize = 200;
const LAPLACE_GRAD_TOL: f64 = 1e-8;

pub(crate) struct Mode {
    pub mode: DVector<f64>,
    pub neg_hessian: DMatrix<f64>,
}

/// Negative Hessian by central differences of the exact gradient,
/// step `1e-5 (1 + |theta_i|)`, symmetrized.
fn fd_neg_hessian<T: LogDensity>(target: &T, theta: &[f64]) -> DMatrix<f64> {
    let d = theta.len();
    let mut h = DMatrix::zeros(d, d);
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    let mut t = theta.to_vec();
    for i in 0..d {
        let step = 1e-5 * (1.0 + theta[i].abs());
        t[i] = theta[i] + step;
        target.log_density(&t, &mut gp);
        t[i] = theta[i] - step;
        target.log_density(&t, &mut gm);
        t[i] = theta[i];
        for j in 0..d {
            h[(j, i)] = -(gp[j] - gm[j]) / (2.0 * step);
        }
    }
    linalg::symmetrize(&mut h);
    h
}

/// Damped Newton ascent from the origin.
pub(crate) fn find_mode<T: LogDensity>(target: &T, d: usize) -> Result<Mode> {
    let mut theta = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut lp = target.log_density(&theta, &mut grad);
    if !lp.is_finite() {
        return Err(Error::OptimizationFailure("log-density not finite at the origin".into()));
    }
    let mut trial_grad = vec![0.0; d];
    for _ in 0..LAPLACE_MAX_ITERS {
        let g = DVector::from_column_slice(&grad);
        let h = fd_neg_hessian(target, &theta);
        let grad_norm = g.norm();

        // Levenberg-style damping until the negative Hessian is positive definite.
        let mut damping = 0.0;
        let scale = h.diagonal().amax().max(1e-12);
        let (dir, chol_ok) = loop {
            let mut hd = h.clone();
            for i in 0..d {
                hd[(i, i)] += damping;
            }
            if let Some(ch) = nalgebra::Cholesky::new(hd) {
                break (ch.solve(&g), damping == 0.0);
            }
            damping = if damping == 0.0 { 1e-8 * scale } else { damping * 10.0 };
            if damping > 1e12 * scale {
                return Err(Error::OptimizationFailure("could not regularize the Hessian".into()));
            }
        };
        let decrement = g.dot(&dir);
        if grad_norm <= LAPLACE_GRAD_TOL || (chol_ok && decrement <= 1e-20) {
            return Ok(Mode { mode: DVector::from_vec(theta), neg_hessian: h });
        }

        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            let trial_lp = target.log_density(&trial, &mut trial_grad);
            if trial_lp.is_finite() && trial_lp >= lp + 1e-4 * step * decrement.min(0.0) && trial_lp >= lp {
                theta = trial;
                lp = trial_lp;
                grad.copy_from_slice(&trial_grad);
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Err(Error::OptimizationFailure(format!(
        "Newton ascent did not converge within {LAPLACE_MAX_ITERS} iterations"
    )))
}

/// Gaussian at the mode of `pi_w` with covariance equal to the inverse
/// negative Hessian there.
pub fn laplace_approximation(model: &ModelSpec, w: &WeightVector) -> Result<GaussianDistribution> {
    if w.full_dim() != model.num_data() {
        return Err(Error::DimensionMismatch { expected: model.num_data(), got: w.full_dim() });
    }
    let target = CoresetTarget { model, weights: w };
    laplace_of(&target, model.dim())
}

/// Laplace approximation of the full-data posterior.
pub fn laplace_full(model: &ModelSpec) -> Result<GaussianDistribution> {
    laplace_of(&FullTarget(model), model.dim())
}

fn laplace_of<T: LogDensity>(target: &T, d: usize) -> Result<GaussianDistribution> {
    let mode = find_mode(target, d)?;
    let cov = linalg::spd_inverse(&mode.neg_hessian)
        .map_err(|_| Error::OptimizationFailure("negative Hessian at the mode is not positive definite".into()))?;
    GaussianDistribution::new(mode.mode, cov)
}
