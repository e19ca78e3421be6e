//! Bayesian models: per-datum potentials `f_n(theta) = log p(x_n | theta)`,
//! prior log-densities, their gradients, and closed-form coreset posteriors
//! for the conjugate variants.
//!
//! Every `*_var` parameter is a variance, never a standard deviation.
//! Potentials keep their normalizing constants so that sums over the data
//! equal the log-likelihood exactly.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::coreset::WeightVector;
use crate::error::{Error, Result};
use crate::gaussian::GaussianDistribution;
use crate::linalg;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("{name} must be strictly positive, got {v}")))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
    out
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidModel(format!("{name} has a non-finite entry at flat index {i}"))),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Isotropic Gaussian location model: `theta ~ N(prior_mean, prior_var I)`,
/// `x_n ~ N(theta, noise_var I)`.
#[derive(Debug, Clone)]
pub struct GaussianLocation {
    prior_mean: DVector<f64>,
    prior_var: f64,
    noise_var: f64,
    n: usize,
    d: usize,
    data: Vec<f64>,
    sum_x: DVector<f64>,
    sum_sq: f64,
}

impl GaussianLocation {
    pub fn new(prior_mean: DVector<f64>, prior_var: f64, noise_var: f64, data: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = data.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidModel("data must have N >= 1 rows and D >= 1 columns".into()));
        }
        if prior_mean.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: prior_mean.len() });
        }
        check_positive("prior_var", prior_var)?;
        check_positive("noise_var", noise_var)?;
        let data = row_major(data);
        check_finite("data", &data)?;
        check_finite("prior_mean", prior_mean.as_slice())?;
        let mut sum_x = DVector::zeros(d);
        let mut sum_sq = 0.0;
        for row in data.chunks_exact(d) {
            for (s, &x) in sum_x.iter_mut().zip(row) {
                *s += x;
            }
            sum_sq += dot(row, row);
        }
        Ok(Self { prior_mean, prior_var, noise_var, n, d, data, sum_x, sum_sq })
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }
    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }
    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.d..(n + 1) * self.d]
    }
    pub fn data_sum(&self) -> &DVector<f64> {
        &self.sum_x
    }
}

/// Bayesian linear regression with known noise:
/// `theta ~ N(prior_mean, prior_var I)`, `y_n ~ N(x_n^T theta, noise_var)`.
#[derive(Debug, Clone)]
pub struct BayesLinReg {
    prior_mean: DVector<f64>,
    prior_var: f64,
    noise_var: f64,
    n: usize,
    d: usize,
    design: Vec<f64>,
    responses: Vec<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

impl BayesLinReg {
    pub fn new(
        design: &DMatrix<f64>,
        responses: &[f64],
        prior_mean: DVector<f64>,
        prior_var: f64,
        noise_var: f64,
    ) -> Result<Self> {
        let (n, d) = design.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidModel("design must have N >= 1 rows and D >= 1 columns".into()));
        }
        if responses.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: responses.len() });
        }
        if prior_mean.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: prior_mean.len() });
        }
        check_positive("prior_var", prior_var)?;
        check_positive("noise_var", noise_var)?;
        check_finite("responses", responses)?;
        let rows = row_major(design);
        check_finite("design", &rows)?;
        let xtx = design.tr_mul(design);
        let y = DVector::from_column_slice(responses);
        let xty = design.tr_mul(&y);
        let yty = y.dot(&y);
        Ok(Self {
            prior_mean,
            prior_var,
            noise_var,
            n,
            d,
            design: rows,
            responses: responses.to_vec(),
            xtx,
            xty,
            yty,
        })
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }
    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }
    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
    pub fn row(&self, n: usize) -> &[f64] {
        &self.design[n * self.d..(n + 1) * self.d]
    }
    pub fn responses(&self) -> &[f64] {
        &self.responses
    }
}

/// Logistic regression with labels in {-1, +1} and independent
/// `Cauchy(0, prior_scale)` priors on every coefficient.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    prior_scale: f64,
    n: usize,
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl LogisticRegression {
    pub fn new(features: &DMatrix<f64>, labels: &[f64], prior_scale: f64) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidModel("features must have N >= 1 rows and D >= 1 columns".into()));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidModel(format!("label {} at row {i} is not -1 or +1", labels[i])));
        }
        check_positive("prior_scale", prior_scale)?;
        let rows = row_major(features);
        check_finite("features", &rows)?;
        Ok(Self { prior_scale, n, d, features: rows, labels: labels.to_vec() })
    }

    pub fn prior_scale(&self) -> f64 {
        self.prior_scale
    }
    pub fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.d..(n + 1) * self.d]
    }
    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

#[derive(Debug, Clone)]
pub enum ModelSpec {
    GaussianLocation(GaussianLocation),
    BayesLinReg(BayesLinReg),
    LogisticRegression(LogisticRegression),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::GaussianLocation(_) => "gaussian-location",
            ModelSpec::BayesLinReg(_) => "linear-regression",
            ModelSpec::LogisticRegression(_) => "logistic-regression",
        }
    }

    /// Number of potentials N.
    pub fn num_data(&self) -> usize {
        match self {
            ModelSpec::GaussianLocation(m) => m.n,
            ModelSpec::BayesLinReg(m) => m.n,
            ModelSpec::LogisticRegression(m) => m.n,
        }
    }

    /// Parameter dimension P.
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::GaussianLocation(m) => m.d,
            ModelSpec::BayesLinReg(m) => m.d,
            ModelSpec::LogisticRegression(m) => m.d,
        }
    }

    /// True when coreset posteriors are Gaussian and available in closed form.
    pub fn is_conjugate(&self) -> bool {
        !matches!(self, ModelSpec::LogisticRegression(_))
    }

    fn check_index(&self, n: usize) -> Result<()> {
        let len = self.num_data();
        if n < len {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { index: n, len })
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() })
        }
    }

    /// `f_n(theta)`, including normalizing constants.
    pub fn potential(&self, n: usize, theta: &DVector<f64>) -> Result<f64> {
        self.check_index(n)?;
        self.check_theta(theta.as_slice())?;
        Ok(self.potential_unchecked(n, theta.as_slice()))
    }

    pub(crate) fn potential_unchecked(&self, n: usize, theta: &[f64]) -> f64 {
        match self {
            ModelSpec::GaussianLocation(m) => {
                let x = m.row(n);
                let sq: f64 = x.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
                -0.5 * m.d as f64 * (LN_2PI + m.noise_var.ln()) - 0.5 * sq / m.noise_var
            }
            ModelSpec::BayesLinReg(m) => {
                let r = m.responses[n] - dot(m.row(n), theta);
                -0.5 * (LN_2PI + m.noise_var.ln()) - 0.5 * r * r / m.noise_var
            }
            ModelSpec::LogisticRegression(m) => -softplus(-m.labels[n] * dot(m.row(n), theta)),
        }
    }

    /// Gradient of `f_n` with respect to theta.
    pub fn potential_grad_theta(&self, n: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_index(n)?;
        self.check_theta(theta.as_slice())?;
        let mut g = DVector::zeros(self.dim());
        self.add_potential_grad(n, theta.as_slice(), 1.0, g.as_mut_slice());
        Ok(g)
    }

    /// `out += scale * grad f_n(theta)`.
    pub(crate) fn add_potential_grad(&self, n: usize, theta: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            ModelSpec::GaussianLocation(m) => {
                let c = scale / m.noise_var;
                for ((o, x), t) in out.iter_mut().zip(m.row(n)).zip(theta) {
                    *o += c * (x - t);
                }
            }
            ModelSpec::BayesLinReg(m) => {
                let x = m.row(n);
                let c = scale * (m.responses[n] - dot(x, theta)) / m.noise_var;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o += c * xi;
                }
            }
            ModelSpec::LogisticRegression(m) => {
                let x = m.row(n);
                let y = m.labels[n];
                // d/dtheta [-ln(1 + e^{-y x.theta})] = y x / (1 + e^{y x.theta})
                let c = scale * y / (1.0 + (y * dot(x, theta)).exp());
                for (o, xi) in out.iter_mut().zip(x) {
                    *o += c * xi;
                }
            }
        }
    }

    /// `log pi_0(theta)`.
    pub fn prior_logdensity(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta.as_slice())?;
        Ok(self.prior_unchecked(theta.as_slice()))
    }

    pub fn prior_grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta.as_slice())?;
        let mut g = DVector::zeros(self.dim());
        self.add_prior_grad(theta.as_slice(), g.as_mut_slice());
        Ok(g)
    }

    fn gaussian_prior(&self) -> Option<(&DVector<f64>, f64)> {
        match self {
            ModelSpec::GaussianLocation(m) => Some((&m.prior_mean, m.prior_var)),
            ModelSpec::BayesLinReg(m) => Some((&m.prior_mean, m.prior_var)),
            ModelSpec::LogisticRegression(_) => None,
        }
    }

    pub(crate) fn prior_unchecked(&self, theta: &[f64]) -> f64 {
        match self {
            ModelSpec::LogisticRegression(m) => {
                let s = m.prior_scale;
                theta.iter().map(|t| -(PI * s).ln() - (1.0 + (t / s) * (t / s)).ln()).sum()
            }
            _ => {
                let (mu, var) = self.gaussian_prior().expect("conjugate model has Gaussian prior");
                let sq: f64 = theta.iter().zip(mu.iter()).map(|(t, m)| (t - m) * (t - m)).sum();
                -0.5 * theta.len() as f64 * (LN_2PI + var.ln()) - 0.5 * sq / var
            }
        }
    }

    pub(crate) fn add_prior_grad(&self, theta: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::LogisticRegression(m) => {
                let s2 = m.prior_scale * m.prior_scale;
                for (o, t) in out.iter_mut().zip(theta) {
                    *o -= 2.0 * t / (s2 + t * t);
                }
            }
            _ => {
                let (mu, var) = self.gaussian_prior().expect("conjugate model has Gaussian prior");
                for ((o, t), m) in out.iter_mut().zip(theta).zip(mu.iter()) {
                    *o -= (t - m) / var;
                }
            }
        }
    }

    /// `sum_n f_n(theta)` over the whole dataset. The quadratic models use
    /// cached sufficient statistics; logistic regression streams the data.
    pub fn total_potential(&self, theta: &[f64]) -> f64 {
        match self {
            ModelSpec::GaussianLocation(m) => {
                let n = m.n as f64;
                let sq = m.sum_sq - 2.0 * dot(m.sum_x.as_slice(), theta) + n * dot(theta, theta);
                -0.5 * n * m.d as f64 * (LN_2PI + m.noise_var.ln()) - 0.5 * sq / m.noise_var
            }
            ModelSpec::BayesLinReg(m) => {
                let t = DVector::from_column_slice(theta);
                let sq = m.yty - 2.0 * m.xty.dot(&t) + t.dot(&(&m.xtx * &t));
                -0.5 * m.n as f64 * (LN_2PI + m.noise_var.ln()) - 0.5 * sq / m.noise_var
            }
            ModelSpec::LogisticRegression(_) => (0..self.num_data()).map(|n| self.potential_unchecked(n, theta)).sum(),
        }
    }

    /// `out += grad sum_n f_n(theta)`.
    pub fn add_total_potential_grad(&self, theta: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::GaussianLocation(m) => {
                let n = m.n as f64;
                for ((o, s), t) in out.iter_mut().zip(m.sum_x.iter()).zip(theta) {
                    *o += (s - n * t) / m.noise_var;
                }
            }
            ModelSpec::BayesLinReg(m) => {
                let t = DVector::from_column_slice(theta);
                let g = (&m.xty - &m.xtx * &t) / m.noise_var;
                for (o, v) in out.iter_mut().zip(g.iter()) {
                    *o += v;
                }
            }
            ModelSpec::LogisticRegression(_) => {
                for n in 0..self.num_data() {
                    self.add_potential_grad(n, theta, 1.0, out);
                }
            }
        }
    }

    /// Unnormalized `log pi_w(theta) = log pi_0(theta) + sum_n w_n f_n(theta)`,
    /// touching only the support of `w`. Writes the gradient into `grad`.
    pub fn coreset_log_density(&self, w: &WeightVector, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut lp = self.prior_unchecked(theta);
        self.add_prior_grad(theta, grad);
        for (&n, &wn) in w.support().iter().zip(w.values()) {
            if wn != 0.0 {
                lp += wn * self.potential_unchecked(n, theta);
                self.add_potential_grad(n, theta, wn, grad);
            }
        }
        lp
    }

    /// Full-data log posterior (unnormalized) and gradient, via the
    /// sufficient-statistic fast paths where available.
    pub fn full_log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.add_prior_grad(theta, grad);
        self.add_total_potential_grad(theta, grad);
        self.prior_unchecked(theta) + self.total_potential(theta)
    }

    /// Exact coreset posterior `pi_w` for the conjugate models.
    pub fn conjugate_coreset_posterior(&self, w: &WeightVector) -> Result<GaussianDistribution> {
        if w.full_dim() != self.num_data() {
            return Err(Error::DimensionMismatch { expected: self.num_data(), got: w.full_dim() });
        }
        match self {
            ModelSpec::GaussianLocation(m) => {
                let total: f64 = w.values().iter().sum();
                let precision = 1.0 / m.prior_var + total / m.noise_var;
                let var = 1.0 / precision;
                let mut lin = &m.prior_mean / m.prior_var;
                for (&n, &wn) in w.support().iter().zip(w.values()) {
                    for (l, x) in lin.iter_mut().zip(m.row(n)) {
                        *l += wn * x / m.noise_var;
                    }
                }
                GaussianDistribution::isotropic(lin * var, var)
            }
            ModelSpec::BayesLinReg(m) => {
                let d = m.d;
                let mut precision = DMatrix::from_diagonal_element(d, d, 1.0 / m.prior_var);
                let mut lin = &m.prior_mean / m.prior_var;
                for (&n, &wn) in w.support().iter().zip(w.values()) {
                    let x = DVector::from_column_slice(m.row(n));
                    precision.ger(wn / m.noise_var, &x, &x, 1.0);
                    lin.axpy(wn * m.responses[n] / m.noise_var, &x, 1.0);
                }
                linalg::symmetrize(&mut precision);
                let chol = linalg::cholesky(&precision)?;
                let mean = chol.solve(&lin);
                let mut cov = chol.inverse();
                linalg::symmetrize(&mut cov);
                GaussianDistribution::new(mean, cov)
            }
            ModelSpec::LogisticRegression(_) => Err(Error::UnsupportedModel("logistic-regression")),
        }
    }
}

/// Radial basis functions `exp(-|x - center|^2 / (2 scale^2))` on 2-D inputs.
#[derive(Debug, Clone)]
pub struct RbfBasisSpec {
    centers: DMatrix<f64>,
    scales: Vec<f64>,
}

/// Scale of the single near-constant basis.
pub const CONSTANT_BASIS_SCALE: f64 = 100.0;

impl RbfBasisSpec {
    pub fn new(centers: DMatrix<f64>, scales: Vec<f64>) -> Result<Self> {
        if centers.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: centers.ncols() });
        }
        if centers.nrows() != scales.len() {
            return Err(Error::DimensionMismatch { expected: centers.nrows(), got: scales.len() });
        }
        if scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument("RBF scales must be strictly positive".into()));
        }
        let n_const = scales.iter().filter(|&&s| s == CONSTANT_BASIS_SCALE).count();
        if n_const != 1 {
            return Err(Error::InvalidArgument(format!(
                "exactly one RBF basis must have scale {CONSTANT_BASIS_SCALE}, found {n_const}"
            )));
        }
        Ok(Self { centers, scales })
    }

    /// `per_scale` centers drawn uniformly from `points` for every scale,
    /// plus one near-constant basis centred at the mean of the points.
    pub fn generate<R: Rng + ?Sized>(
        points: &DMatrix<f64>,
        per_scale: usize,
        scales: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: points.ncols() });
        }
        if points.nrows() == 0 {
            return Err(Error::InsufficientData("no points to place RBF centers".into()));
        }
        let k = per_scale * scales.len() + 1;
        let mut centers = DMatrix::zeros(k, 2);
        let mut all_scales = Vec::with_capacity(k);
        let mut row = 0;
        for &s in scales {
            for _ in 0..per_scale {
                let i = rng.random_range(0..points.nrows());
                centers.row_mut(row).copy_from(&points.row(i));
                all_scales.push(s);
                row += 1;
            }
        }
        centers.row_mut(row).copy_from(&points.row_mean());
        all_scales.push(CONSTANT_BASIS_SCALE);
        Self::new(centers, all_scales)
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }
    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

/// Feature matrix with entry `(n, k) = exp(-|x_n - mu_k|^2 / (2 sigma_k^2))`.
pub fn rbf_featurize(points: &DMatrix<f64>, basis: &RbfBasisSpec) -> Result<DMatrix<f64>> {
    if points.ncols() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: points.ncols() });
    }
    let (n, k) = (points.nrows(), basis.len());
    Ok(DMatrix::from_fn(n, k, |i, j| {
        let dx = points[(i, 0)] - basis.centers[(j, 0)];
        let dy = points[(i, 1)] - basis.centers[(j, 1)];
        let s = basis.scales[j];
        (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalPrior {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub noise_var: f64,
}

/// Prior mean, prior variance and noise variance set to the empirical
/// mean, second moment and (unbiased) variance of the responses.
pub fn empirical_prior_from_responses(responses: &[f64]) -> Result<EmpiricalPrior> {
    let n = responses.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 responses, got {n}")));
    }
    check_finite("responses", responses)?;
    let nf = n as f64;
    let mean = responses.iter().sum::<f64>() / nf;
    let second = responses.iter().map(|y| y * y).sum::<f64>() / nf;
    let var = responses.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (nf - 1.0);
    check_positive("noise_var (response variance)", var)?;
    check_positive("prior_var (response second moment)", second)?;
    Ok(EmpiricalPrior { prior_mean: mean, prior_var: second, noise_var: var })
}
