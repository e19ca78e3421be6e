//! Dense linear-algebra helpers shared by the optimizer, sampler and metrics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Replace `m` by `(m + m^T) / 2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::LinearAlgebra(format!("{}x{} matrix is not positive definite", m.nrows(), m.ncols())))
}

/// `ln det` of a positive definite matrix from its Cholesky factor.
pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Least squares `min ||a x - b||` through an SVD, tolerant of rank deficiency.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eps = f64::EPSILON * (a.nrows().max(a.ncols()) as f64) * a.amax().max(1.0);
    a.clone().svd(true, true).solve(b, eps).expect("SVD with U and V^T requested")
}

/// Nonnegative least squares, `min ||a x - b||` subject to `x >= 0`
/// (Lawson-Hanson active set). Returns the solution and the residual norm.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let (m, n) = a.shape();
    assert_eq!(b.len(), m, "nnls: right-hand side has wrong length");
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 10.0 * f64::EPSILON * a.amax().max(1.0) * (m.max(n) as f64) * b.amax().max(1.0);
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let resid = b - a * &x;
        let w = a.tr_mul(&resid);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;

        // Inner loop: keep the passive-set least squares solution feasible.
        for _ in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let a_p = a.select_columns(&idx);
            let s_p = lstsq(&a_p, b);
            if s_p.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = s_p[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if s_p[k] <= 0.0 {
                    let denom = x[i] - s_p[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s_p[k] - x[i]);
            }
            let floor = f64::EPSILON * x.amax().max(f64::MIN_POSITIVE);
            for &i in &idx {
                if x[i] <= floor {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if idx.iter().all(|&i| !passive[i]) {
                break;
            }
        }
    }
    let resid = (b - a * &x).norm();
    (x, resid)
}

/// Euclidean projection of `v` onto `{w : a w = b, w >= 0}`.
///
/// A stacked penalty NNLS locates the active set; the solution is then
/// recomputed exactly on that set and refined until the KKT conditions hold.
/// Returns `None` when the set is empty.
pub fn project_affine_nonneg(a: &DMatrix<f64>, b: &DVector<f64>, v: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    let scale = a.amax().max(1.0);
    let rho = 1e6 / (scale * scale);
    let sqrt_rho = rho.sqrt();

    let mut stacked = DMatrix::zeros(m + n, n);
    stacked.rows_mut(0, m).copy_from(&(a * sqrt_rho));
    stacked.rows_mut(m, n).fill_with_identity();
    let mut rhs = DVector::zeros(m + n);
    rhs.rows_mut(0, m).copy_from(&(b * sqrt_rho));
    rhs.rows_mut(m, n).copy_from(v);
    let (approx, _) = nnls(&stacked, &rhs);

    let b_scale = b.amax().max(1.0);
    let feas_tol = 1e-9 * b_scale;
    let mut free: Vec<bool> = approx.iter().map(|&x| x > 1e-9 * approx.amax().max(1.0)).collect();

    for _ in 0..(4 * n + 10) {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            break;
        }
        let a_f = a.select_columns(&idx);
        let v_f = DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
        // w_F = v_F - A_F^T nu, with A_F w_F = b.
        let gram = &a_f * a_f.transpose();
        let nu = lstsq(&gram, &(&a_f * &v_f - b));
        let w_f = &v_f - a_f.tr_mul(&nu);
        let mut w = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            w[i] = w_f[k];
        }
        if (a * &w - b).amax() > feas_tol {
            break;
        }
        let mult = a.tr_mul(&nu) - v;
        let neg = idx.iter().copied().filter(|&i| w[i] < 0.0).min_by(|&i, &j| w[i].total_cmp(&w[j]));
        let viol = (0..n)
            .filter(|&i| !free[i] && mult[i] < -1e-12 * scale * b_scale)
            .min_by(|&i, &j| mult[i].total_cmp(&mult[j]));
        match (neg, viol) {
            (None, None) => return Some(w),
            (Some(i), _) => free[i] = false,
            (None, Some(i)) => free[i] = true,
        }
    }

    // Fall back to the penalty solution when it is (nearly) feasible.
    if (a * &approx - b).amax() <= 1e-6 * b_scale {
        Some(approx)
    } else {
        None
    }
}
