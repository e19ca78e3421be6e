//! Posterior-quality metrics: Gaussian KL under normality, relative moment
//! errors, IMQ maximum mean discrepancy and IMQ kernel Stein discrepancy.
//! MMD and KSD are biased V-statistics, clamped at zero before the square root.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::GaussianDistribution;
use crate::linalg;

/// Sample mean and unbiased covariance with `1e-9 trace / P` added to the
/// diagonal (plain `1e-9` when the samples are constant).
pub fn fit_gaussian(samples: &DMatrix<f64>) -> Result<GaussianDistribution> {
    let (s, p) = samples.shape();
    if p == 0 || s < p + 2 {
        return Err(Error::InsufficientData(format!("fitting a {p}-dimensional Gaussian needs at least {} samples, got {s}", p + 2)));
    }
    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (s as f64 - 1.0);
    linalg::symmetrize(&mut cov);
    let scale = cov.trace() / p as f64;
    let jitter = if scale > 0.0 { 1e-9 * scale } else { 1e-9 };
    for i in 0..p {
        cov[(i, i)] += jitter;
    }
    GaussianDistribution::new(mean, cov)
}

/// `KL(p || q)` between two Gaussians, through Cholesky factors, clamped at 0.
pub fn gaussian_kl(p: &GaussianDistribution, q: &GaussianDistribution) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: q.dim() });
    }
    let cq = linalg::cholesky(&q.covariance)?;
    let cp = linalg::cholesky(&p.covariance)?;
    let lq = cq.l();
    let lp = cp.l();
    let m = lq.solve_lower_triangular(&lp).ok_or_else(|| Error::LinearAlgebra("singular Cholesky factor".into()))?;
    let trace = m.norm_squared();
    let diff = &q.mean - &p.mean;
    let z = lq.solve_lower_triangular(&diff).ok_or_else(|| Error::LinearAlgebra("singular Cholesky factor".into()))?;
    let logdet = linalg::log_det_chol(&cq) - linalg::log_det_chol(&cp);
    let kl = 0.5 * (trace + z.norm_squared() - d as f64 + logdet);
    if !kl.is_finite() {
        return Err(Error::Numeric("non-finite Gaussian KL".into()));
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativeErrors {
    pub rel_mean_err: f64,
    pub rel_cov_err: f64,
    /// Set when the reference mean is zero and the mean error is absolute.
    pub mean_is_absolute: bool,
}

/// `||mu_a - mu_t|| / ||mu_t||` and `||Sigma_a - Sigma_t||_F / ||Sigma_t||_F`.
pub fn relative_moment_errors(approx: &GaussianDistribution, truth: &GaussianDistribution) -> Result<RelativeErrors> {
    if approx.dim() != truth.dim() {
        return Err(Error::DimensionMismatch { expected: truth.dim(), got: approx.dim() });
    }
    let mean_err = (&approx.mean - &truth.mean).norm();
    let tn = truth.mean.norm();
    let (rel_mean_err, mean_is_absolute) = if tn > 0.0 { (mean_err / tn, false) } else { (mean_err, true) };
    let cn = truth.covariance.norm();
    let rel_cov_err = (&approx.covariance - &truth.covariance).norm() / cn.max(f64::MIN_POSITIVE);
    Ok(RelativeErrors { rel_mean_err, rel_cov_err, mean_is_absolute })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Mean of `(c^2 + |a_i - b_j|^2)^{-1/2}` over all pairs. Row sums are
/// computed in parallel and added in a fixed order.
fn imq_mean(a: &[Vec<f64>], b: &[Vec<f64>], c2: f64) -> f64 {
    let row_sums: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| 1.0 / (c2 + sq_dist(x, y)).sqrt()).sum::<f64>())
        .collect();
    row_sums.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// IMQ-kernel MMD between two sample sets (rows are points).
pub fn mmd_imq(x: &DMatrix<f64>, y: &DMatrix<f64>, c: f64) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::InsufficientData("MMD needs at least one point per set".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: y.ncols() });
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!("IMQ scale must be positive, got {c}")));
    }
    let (xr, yr) = (rows(x), rows(y));
    let c2 = c * c;
    let mmd2 = imq_mean(&xr, &xr, c2) + imq_mean(&yr, &yr, c2) - 2.0 * imq_mean(&xr, &yr, c2);
    Ok(mmd2.max(0.0).sqrt())
}

/// Stein kernel for `k(x, y) = (c^2 + |x - y|^2)^beta` with scores `sx`, `sy`.
fn stein_kernel(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64], c2: f64, beta: f64) -> f64 {
    let p = x.len() as f64;
    let mut r2 = 0.0;
    let mut ss = 0.0;
    let mut dd = 0.0;
    for i in 0..x.len() {
        let delta = x[i] - y[i];
        r2 += delta * delta;
        ss += sx[i] * sy[i];
        dd += delta * (sy[i] - sx[i]);
    }
    let q = c2 + r2;
    let k = q.powf(beta);
    let q1 = k / q;
    let q2 = q1 / q;
    let trace = -4.0 * beta * (beta - 1.0) * q2 * r2 - 2.0 * beta * p * q1;
    k * ss + 2.0 * beta * q1 * dd + trace
}

/// IMQ kernel Stein discrepancy of `samples` against the density whose
/// score (`grad log p`) `score` writes into its second argument.
pub fn ksd_imq<F>(samples: &DMatrix<f64>, score: F, c: f64, beta: f64) -> Result<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let (s, p) = samples.shape();
    if s == 0 {
        return Err(Error::InsufficientData("KSD needs at least one sample".into()));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!("IMQ scale must be positive, got {c}")));
    }
    if !(beta > -1.0 && beta < 0.0) {
        return Err(Error::InvalidArgument(format!("IMQ exponent must lie in (-1, 0), got {beta}")));
    }
    let xs = rows(samples);
    let scores: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| {
            let mut g = vec![0.0; p];
            score(x, &mut g);
            g
        })
        .collect();
    if let Some(i) = scores.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite score at sample {i}")));
    }
    let c2 = c * c;
    // u is symmetric: diagonal plus twice the strict upper triangle.
    let row_sums: Vec<f64> = (0..s)
        .into_par_iter()
        .map(|i| {
            let diag = stein_kernel(&xs[i], &xs[i], &scores[i], &scores[i], c2, beta);
            let off: f64 = ((i + 1)..s).map(|j| stein_kernel(&xs[i], &xs[j], &scores[i], &scores[j], c2, beta)).sum();
            diag + 2.0 * off
        })
        .collect();
    let ksd2 = row_sums.iter().sum::<f64>() / (s as f64 * s as f64);
    if !ksd2.is_finite() {
        return Err(Error::Numeric("non-finite KSD".into()));
    }
    Ok(ksd2.max(0.0).sqrt())
}

/// Metric values for one approximation against the reference posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub reverse_kl: f64,
    pub forward_kl: f64,
    pub rel_mean_err: f64,
    pub rel_cov_err: f64,
    pub mmd: Option<f64>,
    pub ksd: Option<f64>,
    pub num_samples: usize,
    pub num_reference: usize,
}

impl MetricsRow {
    /// Rejects non-finite values and values below `-1e-12`; clamps the rest at 0.
    pub fn validated(mut self) -> Result<Self> {
        let fix = |name: &str, v: &mut f64| -> Result<()> {
            if !v.is_finite() || *v < -1e-12 {
                return Err(Error::Numeric(format!("metric {name} = {v} is invalid")));
            }
            *v = v.max(0.0);
            Ok(())
        };
        fix("reverse_kl", &mut self.reverse_kl)?;
        fix("forward_kl", &mut self.forward_kl)?;
        fix("rel_mean_err", &mut self.rel_mean_err)?;
        fix("rel_cov_err", &mut self.rel_cov_err)?;
        if let Some(v) = self.mmd.as_mut() {
            fix("mmd", v)?;
        }
        if let Some(v) = self.ksd.as_mut() {
            fix("ksd", v)?;
        }
        Ok(self)
    }
}

/// Sample mean as a vector; shared by tests and the harness.
pub fn sample_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    samples.row_mean().transpose()
}
