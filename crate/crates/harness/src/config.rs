use std::path::{Path, PathBuf};

use coreqn_core::{HmcConfig, QncConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "QNC")]
    Qnc,
    #[serde(rename = "UNIF")]
    Unif,
    #[serde(rename = "LAP")]
    Lap,
    #[serde(rename = "FULL")]
    Full,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Qnc => "QNC",
            Method::Unif => "UNIF",
            Method::Lap => "LAP",
            Method::Full => "FULL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "QNC" => Some(Method::Qnc),
            "UNIF" => Some(Method::Unif),
            "LAP" => Some(Method::Lap),
            "FULL" => Some(Method::Full),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Data source and model. Variances throughout, not standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Problem {
    /// Gaussian location model on synthetic data with prior `N(0, prior_var I)`.
    Gaussian { n: usize, d: usize, prior_var: f64, data_mean_var: f64, noise_var: f64 },
    /// Logistic regression on synthetic data with Cauchy priors.
    Logistic { n: usize, d: usize, prior_scale: f64 },
    /// Logistic regression on a CSV file whose last column holds the labels.
    LogisticCsv { path: PathBuf, prior_scale: f64 },
    /// Bayesian linear regression on RBF features of synthetic 2-D data.
    Rbf { n: usize, basis_per_scale: usize, scales: Vec<f64> },
    /// Bayesian linear regression on a CSV file whose last column is the response.
    /// Missing prior parameters are set from the responses.
    LinregCsv {
        path: PathBuf,
        #[serde(default)]
        prior_mean: Option<f64>,
        #[serde(default)]
        prior_var: Option<f64>,
        #[serde(default)]
        noise_var: Option<f64>,
    },
}

impl Problem {
    /// Dataset size when known without reading files.
    pub fn declared_n(&self) -> Option<usize> {
        match self {
            Problem::Gaussian { n, .. } | Problem::Logistic { n, .. } | Problem::Rbf { n, .. } => Some(*n),
            Problem::LogisticCsv { .. } | Problem::LinregCsv { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub imq_c: f64,
    pub ksd_beta: f64,
    pub eval_samples: usize,
    pub reference_samples: usize,
    pub mmd: bool,
    pub ksd: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { imq_c: 1.0, ksd_beta: -0.5, eval_samples: 1000, reference_samples: 2000, mmd: true, ksd: true }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Qnc, Method::Unif, Method::Lap, Method::Full]
}
fn default_sizes() -> Vec<usize> {
    vec![50, 100, 200, 500]
}
fn default_trials() -> usize {
    10
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_sizes")]
    pub coreset_sizes: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// `coreset_size` and `seed` are overwritten per cell.
    #[serde(default)]
    pub qnc: QncConfig,
    #[serde(default)]
    pub sampler: HmcConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses `COREQN_THREADS` or all cores.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Replace Monte Carlo moments in QNC by closed forms (gaussian only).
    #[serde(default)]
    pub exact_moments: bool,
}

/// Help text listing every config key and its default.
pub const CONFIG_HELP: &str = "\
CONFIG FILE (JSON)
  problem                    required; object tagged by \"kind\":
    gaussian                   n, d, prior_var, data_mean_var, noise_var
    logistic                   n, d, prior_scale
    logistic-csv               path, prior_scale (last column = labels in {-1,1} or {0,1})
    rbf                        n, basis_per_scale, scales (list)
    linreg-csv                 path, prior_mean?, prior_var?, noise_var? (empirical if absent)
  methods                    [\"QNC\",\"UNIF\",\"LAP\",\"FULL\"]
  coreset_sizes              [50,100,200,500]   each <= N
  trials                     10                 >= 1
  qnc.num_samples            500    Monte Carlo draws per iteration (S)
  qnc.max_iters              20     iterations (K)
  qnc.k_tune                 1      line search on iterations k <= k_tune
  qnc.gamma                  1.0    base step size, in [0, 1]
  qnc.tau                    0.01   regularization
  qnc.adaptive_tau           false  raise tau so that cond(G + tau I) <= 1e8
  qnc.stop_patience          3      stop after this many iterations without progress
  qnc.stop_factor            0.99   progress = gradient norm below factor * best
  qnc.coreset_size, qnc.seed        ignored (set per cell)
  sampler.warmup_steps       500
  sampler.leapfrog_steps     20
  sampler.target_accept      0.8
  sampler.initial_step_size  0.1
  metrics.imq_c              1.0
  metrics.ksd_beta           -0.5
  metrics.eval_samples       1000   draws per cell for metrics
  metrics.reference_samples  2000   draws from the full posterior
  metrics.mmd                true
  metrics.ksd                true
  seed                       0      master seed
  output_dir                 \"results\"
  threads                    null   falls back to COREQN_THREADS, then all cores
  exact_moments              false  closed-form moments in QNC (gaussian only)
";

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(HarnessError::config(path, format!("must be positive and finite, got {v}")))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(HarnessError::config(path, format!("must be at least {min}, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read { path: path.to_path_buf(), source })?;
        let config =
            Self::from_json(&text).map_err(|source| HarnessError::ConfigParse { path: path.to_path_buf(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.problem {
            Problem::Gaussian { n, d, prior_var, data_mean_var, noise_var } => {
                at_least("problem.n", *n, 1)?;
                at_least("problem.d", *d, 1)?;
                positive("problem.prior_var", *prior_var)?;
                positive("problem.data_mean_var", *data_mean_var)?;
                positive("problem.noise_var", *noise_var)?;
            }
            Problem::Logistic { n, d, prior_scale } => {
                at_least("problem.n", *n, 1)?;
                at_least("problem.d", *d, 1)?;
                positive("problem.prior_scale", *prior_scale)?;
            }
            Problem::LogisticCsv { prior_scale, .. } => positive("problem.prior_scale", *prior_scale)?,
            Problem::Rbf { n, basis_per_scale, scales } => {
                at_least("problem.n", *n, 2)?;
                at_least("problem.basis_per_scale", *basis_per_scale, 1)?;
                if scales.is_empty() {
                    return Err(HarnessError::config("problem.scales", "must not be empty"));
                }
                for (i, &s) in scales.iter().enumerate() {
                    positive(&format!("problem.scales[{i}]"), s)?;
                }
            }
            Problem::LinregCsv { prior_mean, prior_var, noise_var, .. } => {
                if let Some(m) = prior_mean {
                    if !m.is_finite() {
                        return Err(HarnessError::config("problem.prior_mean", "must be finite"));
                    }
                }
                if let Some(v) = prior_var {
                    positive("problem.prior_var", *v)?;
                }
                if let Some(v) = noise_var {
                    positive("problem.noise_var", *v)?;
                }
            }
        }
        if self.methods.is_empty() {
            return Err(HarnessError::config("methods", "must not be empty"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(HarnessError::config(format!("methods[{i}]"), format!("duplicate method {m}")));
            }
        }
        if self.coreset_sizes.is_empty() {
            return Err(HarnessError::config("coreset_sizes", "must not be empty"));
        }
        for (i, &m) in self.coreset_sizes.iter().enumerate() {
            at_least(&format!("coreset_sizes[{i}]"), m, 1)?;
        }
        if let Some(n) = self.problem.declared_n() {
            self.check_sizes_against(n)?;
        }
        at_least("trials", self.trials, 1)?;
        self.qnc.validate().map_err(|e| HarnessError::config("qnc", e.to_string()))?;
        self.sampler.validate().map_err(|e| HarnessError::config("sampler", e.to_string()))?;
        positive("metrics.imq_c", self.metrics.imq_c)?;
        if !(self.metrics.ksd_beta < 0.0 && self.metrics.ksd_beta.is_finite()) {
            return Err(HarnessError::config("metrics.ksd_beta", format!("must be negative, got {}", self.metrics.ksd_beta)));
        }
        at_least("metrics.eval_samples", self.metrics.eval_samples, 2)?;
        at_least("metrics.reference_samples", self.metrics.reference_samples, 2)?;
        if let Some(t) = self.threads {
            at_least("threads", t, 1)?;
        }
        if self.exact_moments && !matches!(self.problem, Problem::Gaussian { .. }) {
            return Err(HarnessError::config("exact_moments", "only available for the gaussian problem"));
        }
        Ok(())
    }

    /// Every coreset size must be at most `n`.
    pub fn check_sizes_against(&self, n: usize) -> Result<()> {
        for (i, &m) in self.coreset_sizes.iter().enumerate() {
            if m > n {
                return Err(HarnessError::config(format!("coreset_sizes[{i}]"), format!("{m} exceeds N = {n}")));
            }
        }
        Ok(())
    }
}
