use std::path::Path;

use coreqn_core::model::{
    empirical_prior_from_responses, rbf_featurize, BayesLinReg, GaussianLocation, LogisticRegression, RbfBasisSpec,
};
use coreqn_core::rng::{derive_seed, rng_from_seed};
use coreqn_core::ModelSpec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Problem;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Regression,
    Classification,
}

/// Feature matrix plus the response (or label) column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub features: DMatrix<f64>,
    pub responses: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Draws `mu ~ N(0, data_mean_var I)` and then `x_n ~ N(mu, noise_var I)`.
/// Returns the data and `mu`.
pub fn generate_synthetic_gaussian(
    n: usize,
    d: usize,
    data_mean_var: f64,
    noise_var: f64,
    seed: u64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = rng_from_seed(seed);
    let sd_mean = data_mean_var.max(0.0).sqrt();
    let sd = noise_var.max(0.0).sqrt();
    let mu = DVector::from_fn(d, |_, _| sd_mean * normal(&mut rng));
    // Row-major fill so the data do not depend on nalgebra's storage order.
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = mu[j] + sd * normal(&mut rng);
        }
    }
    (x, mu)
}

/// Standard normal features, `theta ~ N(0, I)` and labels in {-1, 1} with
/// `P(y = 1) = 1 / (1 + exp(-x^T theta))`.
pub fn generate_synthetic_logistic(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let theta: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let mut x = DMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..d {
            x[(i, j)] = normal(&mut rng);
            z += x[(i, j)] * theta[j];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        y.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
    }
    (x, y)
}

/// Points uniform on `[0, 10]^2` with `y = sin(x1) cos(x2) + 0.1 eps`.
pub fn generate_synthetic_rbf_points(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let mut pts = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let a: f64 = rng.random_range(0.0..10.0);
        let b: f64 = rng.random_range(0.0..10.0);
        pts[(i, 0)] = a;
        pts[(i, 1)] = b;
        y.push(a.sin() * b.cos() + 0.1 * normal(&mut rng));
    }
    (pts, y)
}

fn dataset_error(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Dataset { path: path.to_path_buf(), message: message.into() }
}

/// Reads a comma-separated file with a header row. The last column is the
/// response; all other columns are features. Line numbers in errors count
/// the header as line 1.
pub fn load_csv_dataset(path: &Path, schema: Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| HarnessError::Read { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| dataset_error(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if columns.is_empty() || (columns.len() == 1 && columns[0].is_empty()) {
        return Err(dataset_error(path, "empty file"));
    }
    if columns.len() < 2 {
        return Err(dataset_error(path, "need at least one feature column and a response column"));
    }
    let width = columns.len();
    let mut values = Vec::new();
    let mut rows = 0;
    let mut non_finite = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            dataset_error(path, format!("row {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(dataset_error(path, format!("row {line}: expected {width} fields, found {}", record.len())));
        }
        let mut finite = true;
        for (cell, name) in record.iter().zip(&columns) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                dataset_error(path, format!("row {line}, column \"{name}\": cannot parse {cell:?} as a number"))
            })?;
            finite &= v.is_finite();
            values.push(v);
        }
        if !finite {
            non_finite.push(line);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(dataset_error(path, "no data rows"));
    }
    if !non_finite.is_empty() {
        let list: Vec<String> = non_finite.iter().map(|l| l.to_string()).collect();
        return Err(dataset_error(path, format!("non-finite values in rows {}", list.join(", "))));
    }
    let d = width - 1;
    let features = DMatrix::from_fn(rows, d, |i, j| values[i * width + j]);
    let mut responses: Vec<f64> = (0..rows).map(|i| values[i * width + d]).collect();
    if schema == Schema::Classification {
        let pm_one = responses.iter().all(|&y| y == 1.0 || y == -1.0);
        let zero_one = responses.iter().all(|&y| y == 0.0 || y == 1.0);
        if !pm_one {
            if !zero_one {
                return Err(dataset_error(path, format!("labels in column \"{}\" must be in {{-1, 1}} or {{0, 1}}", columns[d])));
            }
            log::warn!("{}: labels in {{0, 1}} remapped to {{-1, 1}}", path.display());
            for y in &mut responses {
                *y = 2.0 * *y - 1.0;
            }
        }
    }
    Ok(Dataset { columns, features, responses })
}

/// Builds the model for a problem; synthetic data use `derive_seed(seed, 0, "data")`.
pub fn build_model(problem: &Problem, seed: u64) -> Result<ModelSpec> {
    let data_seed = derive_seed(seed, 0, "data");
    let model = match problem {
        Problem::Gaussian { n, d, prior_var, data_mean_var, noise_var } => {
            let (x, _) = generate_synthetic_gaussian(*n, *d, *data_mean_var, *noise_var, data_seed);
            ModelSpec::GaussianLocation(GaussianLocation::new(DVector::zeros(*d), *prior_var, *noise_var, &x)?)
        }
        Problem::Logistic { n, d, prior_scale } => {
            let (x, y) = generate_synthetic_logistic(*n, *d, data_seed);
            ModelSpec::LogisticRegression(LogisticRegression::new(&x, &y, *prior_scale)?)
        }
        Problem::LogisticCsv { path, prior_scale } => {
            let ds = load_csv_dataset(path, Schema::Classification)?;
            ModelSpec::LogisticRegression(LogisticRegression::new(&ds.features, &ds.responses, *prior_scale)?)
        }
        Problem::Rbf { n, basis_per_scale, scales } => {
            let (pts, y) = generate_synthetic_rbf_points(*n, data_seed);
            let mut rng = rng_from_seed(derive_seed(seed, 0, "rbf-basis"));
            let basis = RbfBasisSpec::generate(&pts, *basis_per_scale, scales, &mut rng)?;
            let features = rbf_featurize(&pts, &basis)?;
            let prior = empirical_prior_from_responses(&y)?;
            let mean = DVector::from_element(basis.len(), prior.prior_mean);
            ModelSpec::BayesLinReg(BayesLinReg::new(&features, &y, mean, prior.prior_var, prior.noise_var)?)
        }
        Problem::LinregCsv { path, prior_mean, prior_var, noise_var } => {
            let ds = load_csv_dataset(path, Schema::Regression)?;
            let needs_empirical = prior_mean.is_none() || prior_var.is_none() || noise_var.is_none();
            let emp = if needs_empirical { Some(empirical_prior_from_responses(&ds.responses)?) } else { None };
            let pick = |given: &Option<f64>, f: fn(&coreqn_core::model::EmpiricalPrior) -> f64| {
                given.unwrap_or_else(|| f(emp.as_ref().expect("empirical prior computed")))
            };
            let mean = pick(prior_mean, |e| e.prior_mean);
            let pv = pick(prior_var, |e| e.prior_var);
            let nv = pick(noise_var, |e| e.noise_var);
            ModelSpec::BayesLinReg(BayesLinReg::new(
                &ds.features,
                &ds.responses,
                DVector::from_element(ds.dim(), mean),
                pv,
                nv,
            )?)
        }
    };
    Ok(model)
}
