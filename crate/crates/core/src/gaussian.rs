use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Multivariate normal given by its mean and (co)variance.
///
/// Used for exact conjugate posteriors, Laplace approximations and
/// moment-matched fits of sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianDistribution {
    /// Checks shape, symmetry (1e-12 relative) and positive semidefiniteness
    /// (eigenvalues >= -1e-10 trace / D).
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: covariance.nrows() });
        }
        if d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional Gaussian".into()));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameters".into()));
        }
        if !linalg::is_symmetric(&covariance, 1e-12) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let floor = -1e-10 * covariance.trace().abs() / d as f64;
        if linalg::sym_eigenvalues(&covariance)[0] < floor {
            return Err(Error::InvalidArgument("covariance is not positive semidefinite".into()));
        }
        Ok(Self { mean, covariance })
    }

    /// Isotropic `N(mean, var * I)`.
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::from_diagonal_element(d, d, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `n` draws as the rows of an `n x D` matrix (`mean + L z`).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let l = linalg::cholesky(&self.covariance)?.l();
        let mut out = DMatrix::zeros(n, d);
        let mut z = DVector::zeros(d);
        for s in 0..n {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x = &self.mean + &l * &z;
            out.row_mut(s).copy_from(&x.transpose());
        }
        Ok(out)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = linalg::cholesky(&self.covariance)?;
        let diff = x - &self.mean;
        let sol = chol.solve(&diff);
        let d = self.dim() as f64;
        Ok(-0.5 * (diff.dot(&sol) + linalg::log_det_chol(&chol) + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn rejects_asymmetric_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianDistribution::new(DVector::zeros(2), cov).is_err());
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianDistribution::new(DVector::zeros(2), cov).is_err());
    }

    #[test]
    fn sample_moments_match() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let g = GaussianDistribution::new(DVector::from_vec(vec![1.0, -1.0]), cov).unwrap();
        let x = g.sample(100_000, &mut rng_from_seed(3)).unwrap();
        let mean = x.row_mean();
        assert!((mean[0] - 1.0).abs() < 5.0 * (2.0f64 / 1e5).sqrt());
        assert!((mean[1] + 1.0).abs() < 5.0 * (1.0f64 / 1e5).sqrt());
    }

    #[test]
    fn standard_normal_log_density_at_zero() {
        let g = GaussianDistribution::isotropic(DVector::zeros(1), 1.0).unwrap();
        let v = g.log_density(&DVector::zeros(1)).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }
}
