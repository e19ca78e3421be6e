//! Closed-form moments and exact coresets for the Gaussian location model.
//!
//! Under `pi_w = N(m, s I)` every potential is a quadratic in theta, so the
//! covariances that the optimizer normally estimates by sampling are
//! available exactly:
//!
//! `Cov(f_i, f_j) = s / sigma^4 (x_i - m)^T (x_j - m) + s^2 d / (2 sigma^4)`.
//!
//! A zero-KL coreset exists on a support iff some `w >= 0` matches the
//! sufficient statistics `sum w = N` and `sum w x = sum x`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coreset::{init_weights, project, MomentEstimates, MomentSource, WeightVector};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GaussianLocation, ModelSpec};

fn as_gaussian(model: &ModelSpec) -> Result<&GaussianLocation> {
    match model {
        ModelSpec::GaussianLocation(g) => Ok(g),
        _ => Err(Error::UnsupportedModel(model.name())),
    }
}

/// Posterior mean and scalar variance of `pi_w`.
fn posterior_params(g: &GaussianLocation, w: &WeightVector) -> (DVector<f64>, f64) {
    let total = w.sum();
    let s = 1.0 / (1.0 / g.prior_var() + total / g.noise_var());
    let mut lin = g.prior_mean() / g.prior_var();
    for (&n, &wn) in w.support().iter().zip(w.values()) {
        for (l, x) in lin.iter_mut().zip(g.row(n)) {
            *l += wn * x / g.noise_var();
        }
    }
    (lin * s, s)
}

/// Exact `G(w)` over the support and `H(w)(1 - w)`.
pub fn exact_moments_gaussian(model: &ModelSpec, w: &WeightVector) -> Result<MomentEstimates> {
    let g = as_gaussian(model)?;
    if w.full_dim() != model.num_data() {
        return Err(Error::DimensionMismatch { expected: model.num_data(), got: w.full_dim() });
    }
    let (mean, s) = posterior_params(g, w);
    let d = model.dim();
    let m = w.len();
    let s4 = g.noise_var() * g.noise_var();
    let lin = s / s4;
    let cst = s * s * d as f64 / (2.0 * s4);

    // Columns a_m = x_m - mean over the support.
    let a = DMatrix::from_fn(d, m, |r, c| g.row(w.support()[c])[r] - mean[r]);
    let mut gm = a.tr_mul(&a) * lin;
    gm.add_scalar_mut(cst);

    // sum_n (1 - w_n) a_n = (sum x - N mean) - sum_m w_m a_m
    let n = model.num_data() as f64;
    let wv = w.values_vector();
    let resid = (g.data_sum() - &mean * n) - &a * &wv;
    let mass = n - w.sum();
    let mut hw = a.tr_mul(&resid) * lin;
    hw.add_scalar_mut(cst * mass);
    MomentEstimates::new(gm, hw)
}

/// Moment source backed by [`exact_moments_gaussian`]; sample counts and
/// seeds are ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactGaussianMoments;

impl MomentSource for ExactGaussianMoments {
    fn moments(&self, model: &ModelSpec, w: &WeightVector, _: usize, _: u64) -> Result<MomentEstimates> {
        exact_moments_gaussian(model, w)
    }
}

/// `KL(N(m_p, s_p I) || N(m_q, s_q I))` in dimension `d`.
fn isotropic_kl(d: usize, mp: &DVector<f64>, sp: f64, mq: &DVector<f64>, sq: f64) -> f64 {
    let r = sp / sq;
    let df = d as f64;
    // r - 1 - ln r, written to avoid cancellation near r = 1.
    let shape = (r - 1.0) - (r - 1.0).ln_1p();
    (0.5 * (df * shape + (mq - mp).norm_squared() / sq)).max(0.0)
}

/// Closed-form `KL(pi_w || pi)`.
pub fn coreset_kl(model: &ModelSpec, w: &WeightVector) -> Result<f64> {
    let g = as_gaussian(model)?;
    let (mw, sw) = posterior_params(g, w);
    let (m1, s1) = posterior_params(g, &WeightVector::ones(model.num_data()));
    Ok(isotropic_kl(model.dim(), &mw, sw, &m1, s1))
}

/// Closed-form `KL(pi || pi_w)`.
pub fn coreset_forward_kl(model: &ModelSpec, w: &WeightVector) -> Result<f64> {
    let g = as_gaussian(model)?;
    let (mw, sw) = posterior_params(g, w);
    let (m1, s1) = posterior_params(g, &WeightVector::ones(model.num_data()));
    Ok(isotropic_kl(model.dim(), &m1, s1, &mw, sw))
}

/// Sufficient-statistic constraints on the support in centred form:
/// rows `1^T` and `(x_m - xbar)^T`, right-hand side `(N, 0)`.
fn constraints(g: &GaussianLocation, n: usize, support: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let d = g.prior_mean().len();
    let xbar = g.data_sum() / n as f64;
    let mut a = DMatrix::zeros(d + 1, support.len());
    for (c, &i) in support.iter().enumerate() {
        a[(0, c)] = 1.0;
        for (r, x) in g.row(i).iter().enumerate() {
            a[(r + 1, c)] = x - xbar[r];
        }
    }
    let mut b = DVector::zeros(d + 1);
    b[0] = n as f64;
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactWeights {
    pub weights: WeightVector,
    pub feasible: bool,
    pub residual: f64,
}

/// Nonnegative weights on `support` matching the full-data sufficient
/// statistics, by NNLS. Feasible iff the residual is at most `1e-8 N`.
pub fn solve_exact_weights(model: &ModelSpec, support: &[usize]) -> Result<ExactWeights> {
    let g = as_gaussian(model)?;
    let n = model.num_data();
    // Validates the support.
    let template = WeightVector::new(n, support.to_vec(), vec![0.0; support.len()])?;
    let (a, b) = constraints(g, n, template.support());
    let (x, residual) = linalg::nnls(&a, &b);
    let weights = template.with_values(x.iter().map(|v| v.max(0.0)).collect())?;
    Ok(ExactWeights { weights, feasible: residual <= 1e-8 * n as f64, residual })
}

/// Coreset size `3 (d + 1) ceil(ln N)` used for the existence check.
pub fn feasibility_coreset_size(d: usize, n: usize) -> usize {
    3 * (d + 1) * (n as f64).ln().ceil() as usize
}

/// `lambda / (lambda + tau)` for the smallest eigenvalue of `G` above the
/// rank cutoff `1e-10 trace(G) / M`.
pub fn compute_xi(g: &DMatrix<f64>, tau: f64) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let m = g.nrows();
    let trace = g.trace();
    if m == 0 || !(trace > 0.0) {
        return Err(Error::Degenerate("G has no positive eigenvalues".into()));
    }
    let cutoff = 1e-10 * trace / m as f64;
    let lambda = linalg::sym_eigenvalues(g)
        .into_iter()
        .find(|&l| l > cutoff)
        .ok_or_else(|| Error::Degenerate("G has no eigenvalue above the rank cutoff".into()))?;
    Ok(lambda / (lambda + tau))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremCheckReport {
    /// Minimum of the iterate-wise values in `xi_per_iterate`.
    pub xi: f64,
    pub xi_per_iterate: Vec<f64>,
    pub w_star: WeightVector,
    /// `||w_k - w*_k||`, where `w*_k` is the projection of `w_k` onto the
    /// zero-KL set.
    pub distances: Vec<f64>,
    /// `distances[k] / ((1 - gamma xi)^k distances[0])`.
    pub contraction_ratios: Vec<f64>,
    pub kl_per_iterate: Vec<f64>,
    pub kl_at_w_star: f64,
    pub feasible: bool,
}

impl TheoremCheckReport {
    pub fn max_ratio(&self) -> f64 {
        self.contraction_ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs `num_steps` exact-moment Newton steps from `N / M` on `support` and
/// compares the distance to the zero-KL set with the linear rate
/// `(1 - gamma xi)^k`.
pub fn verify_convergence_theorem(
    model: &ModelSpec,
    support: &[usize],
    gamma: f64,
    tau: f64,
    num_steps: usize,
) -> Result<TheoremCheckReport> {
    let exact = solve_exact_weights(model, support)?;
    if !exact.feasible {
        return Err(Error::Precondition(format!(
            "no zero-KL coreset on this support (residual {:.3e})",
            exact.residual
        )));
    }
    let g = as_gaussian(model)?;
    let n = model.num_data();
    let (a, b) = constraints(g, n, exact.weights.support());

    let mut w = init_weights(n, exact.weights.support())?;
    let mut iterates = Vec::with_capacity(num_steps + 1);
    let mut xis = Vec::with_capacity(num_steps + 1);
    for k in 0..=num_steps {
        let m = exact_moments_gaussian(model, &w).map_err(|e| e.at_iteration(k))?;
        xis.push(compute_xi(&m.g_hat, tau).map_err(|e| e.at_iteration(k))?);
        iterates.push(w.clone());
        if k < num_steps {
            let p = crate::coreset::newton_direction(&m, tau).map_err(|e| e.at_iteration(k))?;
            w = project(&w, &(w.values_vector() + p * gamma))?;
        }
    }

    let xi = xis.iter().copied().fold(f64::INFINITY, f64::min);
    let eta = 1.0 - gamma * xi;
    let mut distances = Vec::with_capacity(iterates.len());
    let mut kls = Vec::with_capacity(iterates.len());
    for (k, wk) in iterates.iter().enumerate() {
        let v = wk.values_vector();
        let star = linalg::project_affine_nonneg(&a, &b, &v)
            .ok_or_else(|| Error::Numeric(format!("projection onto the zero-KL set failed at iterate {k}")))?;
        distances.push((v - star).norm());
        kls.push(coreset_kl(model, wk)?);
    }
    let d0 = distances[0];
    let ratios = distances
        .iter()
        .enumerate()
        .map(|(k, &dk)| {
            if dk == 0.0 {
                0.0
            } else {
                dk / (eta.powi(k as i32) * d0)
            }
        })
        .collect();
    let kl_at_w_star = coreset_kl(model, &exact.weights)?;
    Ok(TheoremCheckReport {
        xi,
        xi_per_iterate: xis,
        w_star: exact.weights,
        distances,
        contraction_ratios: ratios,
        kl_per_iterate: kls,
        kl_at_w_star,
        feasible: true,
    })
}
