//! Coreset weights and the quasi-Newton optimizer.
//!
//! A run picks `M` indices uniformly without replacement, starts every
//! selected weight at `N / M`, then repeats: draw from `pi_w`, estimate the
//! covariance moments `G` and `H (1 - w)`, take a regularized Newton step
//! `w + gamma (G + tau I)^{-1} H (1 - w)` and clamp at zero.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelSpec;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{PosteriorSampler, SampleBatch};

/// Nonnegative weights on a fixed, sorted support inside `0..full_dim`.
/// Entries off the support are zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    full_dim: usize,
    support: Vec<usize>,
    values: Vec<f64>,
}

impl WeightVector {
    /// Pairs are sorted by index; duplicates, out-of-range indices and
    /// negative or non-finite values are rejected.
    pub fn new(full_dim: usize, support: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), got: values.len() });
        }
        if let Some(&i) = support.iter().find(|&&i| i >= full_dim) {
            return Err(Error::IndexOutOfRange { index: i, len: full_dim });
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("weights must be finite and nonnegative, got {v}")));
        }
        let mut pairs: Vec<(usize, f64)> = support.into_iter().zip(values).collect();
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|p| p[0].0 == p[1].0) {
            return Err(Error::InvalidArgument("support indices must be distinct".into()));
        }
        let (support, values) = pairs.into_iter().unzip();
        Ok(Self { full_dim, support, values })
    }

    /// Empty support: `pi_w` is the prior.
    pub fn zeros(full_dim: usize) -> Self {
        Self { full_dim, support: Vec::new(), values: Vec::new() }
    }

    /// `w = 1`: `pi_w` is the full posterior.
    pub fn ones(full_dim: usize) -> Self {
        Self { full_dim, support: (0..full_dim).collect(), values: vec![1.0; full_dim] }
    }

    /// Same support, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.full_dim, self.support.clone(), values)
    }

    pub fn full_dim(&self) -> usize {
        self.full_dim
    }
    pub fn support(&self) -> &[usize] {
        &self.support
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    /// Support size M (including entries that have been clamped to zero).
    pub fn len(&self) -> usize {
        self.support.len()
    }
    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
    /// Number of strictly positive weights.
    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
    pub fn values_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
    /// Length-N dense representation.
    pub fn dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.full_dim);
        for (&i, &v) in self.support.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QncConfig {
    pub coreset_size: usize,
    pub num_samples: usize,
    pub max_iters: usize,
    pub k_tune: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Raise `tau` when needed so that `cond(G + tau I) <= 1e8`.
    pub adaptive_tau: bool,
    pub stop_patience: usize,
    pub stop_factor: f64,
    pub seed: u64,
}

impl Default for QncConfig {
    fn default() -> Self {
        Self {
            coreset_size: 100,
            num_samples: 500,
            max_iters: 20,
            k_tune: 1,
            gamma: 1.0,
            tau: 0.01,
            adaptive_tau: false,
            stop_patience: 3,
            stop_factor: 0.99,
            seed: 0,
        }
    }
}

impl QncConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.coreset_size < 1 {
            return bad("coreset_size must be >= 1");
        }
        if self.num_samples < 2 {
            return bad("num_samples must be >= 2");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be strictly positive");
        }
        if self.stop_patience < 1 {
            return bad("stop_patience must be >= 1");
        }
        if !(self.stop_factor > 0.0 && self.stop_factor < 1.0) {
            return bad("stop_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Moment estimates at one iterate: `G` over the support and `H (1 - w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub g_hat: DMatrix<f64>,
    pub hw_hat: DVector<f64>,
    /// `||hw_hat||`, the norm of the estimated KL gradient.
    pub grad_norm: f64,
}

impl MomentEstimates {
    pub fn new(mut g_hat: DMatrix<f64>, hw_hat: DVector<f64>) -> Result<Self> {
        if g_hat.nrows() != hw_hat.len() || g_hat.ncols() != hw_hat.len() {
            return Err(Error::DimensionMismatch { expected: hw_hat.len(), got: g_hat.nrows() });
        }
        if g_hat.iter().chain(hw_hat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite moment estimate".into()));
        }
        linalg::symmetrize(&mut g_hat);
        let grad_norm = hw_hat.norm();
        Ok(Self { g_hat, hw_hat, grad_norm })
    }
}

/// Anything that can produce `(G, H (1 - w))` at a weight vector.
pub trait MomentSource: Sync {
    fn moments(&self, model: &ModelSpec, w: &WeightVector, num_samples: usize, seed: u64) -> Result<MomentEstimates>;
}

/// Monte Carlo moments from `num_samples` posterior draws.
#[derive(Debug, Clone, Copy, Default)]
pub struct MonteCarloMoments<P> {
    pub sampler: P,
}

impl<P: PosteriorSampler> MomentSource for MonteCarloMoments<P> {
    fn moments(&self, model: &ModelSpec, w: &WeightVector, num_samples: usize, seed: u64) -> Result<MomentEstimates> {
        let batch = self.sampler.sample(model, w, num_samples, seed)?;
        estimate_moments(model, w, &batch)
    }
}

/// `M` distinct indices drawn uniformly without replacement, sorted.
pub fn uniform_subsample(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m < 1 || m > n {
        return Err(Error::InvalidArgument(format!("coreset size {m} must lie in [1, {n}]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Weight `N / M` on every selected index.
pub fn init_weights(n: usize, support: &[usize]) -> Result<WeightVector> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("support must be nonempty".into()));
    }
    let v = n as f64 / support.len() as f64;
    WeightVector::new(n, support.to_vec(), vec![v; support.len()])
}

/// Uniform coreset with weights `N / M`.
pub fn unif_baseline(n: usize, m: usize, seed: u64) -> Result<WeightVector> {
    init_weights(n, &uniform_subsample(n, m, seed)?)
}

fn first_nonfinite(model: &ModelSpec, theta: &[f64], draw: usize) -> Error {
    let datum = (0..model.num_data()).find(|&n| !model.potential_unchecked(n, theta).is_finite());
    Error::NonFinitePotential { datum, draw }
}

/// Subtracts the mean, after shifting by the first entry so that constant
/// columns center to exactly zero.
fn center(v: &mut [f64]) {
    let shift = v[0];
    v.iter_mut().for_each(|x| *x -= shift);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Sample covariances of the supported potentials with themselves (`G`) and
/// with `sum_n (1 - w_n) f_n` (`H (1 - w)`).
///
/// The all-data sum is accumulated one draw at a time, so beyond the `S x M`
/// block only `O(S)` extra memory is used.
pub fn estimate_moments(model: &ModelSpec, w: &WeightVector, batch: &SampleBatch) -> Result<MomentEstimates> {
    if w.full_dim() != model.num_data() {
        return Err(Error::DimensionMismatch { expected: model.num_data(), got: w.full_dim() });
    }
    if batch.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: batch.dim() });
    }
    let s = batch.len();
    let m = w.len();
    let mut g = DMatrix::zeros(s, m);
    let mut total = DVector::zeros(s);
    for r in 0..s {
        let theta: Vec<f64> = batch.draws.row(r).iter().copied().collect();
        let t = model.total_potential(&theta);
        if !t.is_finite() {
            return Err(first_nonfinite(model, &theta, r));
        }
        total[r] = t;
        for (j, &n) in w.support().iter().enumerate() {
            let f = model.potential_unchecked(n, &theta);
            if !f.is_finite() {
                return Err(Error::NonFinitePotential { datum: Some(n), draw: r });
            }
            g[(r, j)] = f;
        }
    }
    for mut col in g.column_iter_mut() {
        center(col.as_mut_slice());
    }
    center(total.as_mut_slice());
    let wv = w.values_vector();
    let h = total - &g * &wv;
    let sf = s as f64;
    let g_hat = g.tr_mul(&g) / sf;
    let hw_hat = g.tr_mul(&h) / sf;
    MomentEstimates::new(g_hat, hw_hat)
}

/// Smallest `tau' >= tau` with `cond(G + tau' I) <= max_cond`.
pub fn conditioned_tau(g: &DMatrix<f64>, tau: f64, max_cond: f64) -> f64 {
    let ev = linalg::sym_eigenvalues(g);
    let (lo, hi) = (ev[0].max(0.0), ev[ev.len() - 1].max(0.0));
    tau.max((hi - max_cond * lo) / (max_cond - 1.0))
}

/// Solves `(G + tau I) p = H (1 - w)` by Cholesky. On failure the system
/// is retried once with `2 tau`.
pub fn newton_direction(moments: &MomentEstimates, tau: f64) -> Result<DVector<f64>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let m = moments.hw_hat.len();
    for t in [tau, 2.0 * tau] {
        let mut a = moments.g_hat.clone();
        linalg::symmetrize(&mut a);
        for i in 0..m {
            a[(i, i)] += t;
        }
        if let Some(ch) = nalgebra::Cholesky::new(a.clone()) {
            let mut p = ch.solve(&moments.hw_hat);
            // One step of iterative refinement.
            let r = &moments.hw_hat - &a * &p;
            p += ch.solve(&r);
            if p.iter().all(|v| v.is_finite()) {
                return Ok(p);
            }
        }
    }
    Err(Error::LinearAlgebra(format!("G + tau I not positive definite for tau = {tau:e} and {:e}", 2.0 * tau)))
}

/// `w + gamma (G + tau I)^{-1} H (1 - w)` on the support, before projection.
pub fn newton_step(w: &WeightVector, moments: &MomentEstimates, gamma: f64, tau: f64) -> Result<DVector<f64>> {
    if moments.hw_hat.len() != w.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: moments.hw_hat.len() });
    }
    let p = newton_direction(moments, tau)?;
    Ok(w.values_vector() + p * gamma)
}

/// Clamps proposed support values at zero.
pub fn project(like: &WeightVector, proposed: &DVector<f64>) -> Result<WeightVector> {
    if proposed.len() != like.len() {
        return Err(Error::DimensionMismatch { expected: like.len(), got: proposed.len() });
    }
    if proposed.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite proposed weights".into()));
    }
    like.with_values(proposed.iter().map(|v| v.max(0.0)).collect())
}

/// Curvature constant of the line search.
pub const CURVATURE_C2: f64 = 0.9;
/// Maximum number of step halvings in the line search.
pub const MAX_HALVINGS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineSearchOutcome {
    pub gamma: f64,
    pub halvings: usize,
    pub satisfied: bool,
}

/// Picks `gamma_k` by the curvature condition
/// `|grad KL(w+)^T p| <= c2 |grad KL(w)^T p|` with `w+ = project(w + gamma p)`,
/// halving from `base_gamma` at most [`MAX_HALVINGS`] times. Each trial
/// point gets fresh moments.
#[allow(clippy::too_many_arguments)]
pub fn line_search_gamma(
    model: &ModelSpec,
    w: &WeightVector,
    current: &MomentEstimates,
    direction: &DVector<f64>,
    base_gamma: f64,
    source: &dyn MomentSource,
    num_samples: usize,
    seed: u64,
) -> Result<LineSearchOutcome> {
    let d0 = -current.hw_hat.dot(direction);
    let wv = w.values_vector();
    let mut gamma = base_gamma;
    for t in 0..=MAX_HALVINGS {
        let trial = project(w, &(&wv + direction * gamma))?;
        let m = source.moments(model, &trial, num_samples, derive_seed(seed, t as u64, "line-search"))?;
        let d1 = -m.hw_hat.dot(direction);
        if d1.abs() <= CURVATURE_C2 * d0.abs() {
            return Ok(LineSearchOutcome { gamma, halvings: t, satisfied: true });
        }
        if t < MAX_HALVINGS {
            gamma *= 0.5;
        }
    }
    log::warn!("line search: curvature condition not met after {MAX_HALVINGS} halvings, using gamma = {gamma:e}");
    Ok(LineSearchOutcome { gamma, halvings: MAX_HALVINGS, satisfied: false })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub grad_norm: f64,
    pub gamma: f64,
    pub tau: f64,
    pub step_norm: f64,
    pub active: usize,
    pub line_search: Option<LineSearchOutcome>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QncTrace {
    pub records: Vec<IterationRecord>,
    pub stopped_early: bool,
}

impl QncTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Subsamples `M` indices with `config.seed` and optimizes their weights.
pub fn run_qnc(model: &ModelSpec, source: &dyn MomentSource, config: &QncConfig) -> Result<(WeightVector, QncTrace)> {
    config.validate()?;
    let support = uniform_subsample(model.num_data(), config.coreset_size, config.seed)?;
    run_qnc_on_support(model, source, config, &support)
}

/// Optimizes weights on a given support, starting from `N / M`.
pub fn run_qnc_on_support(
    model: &ModelSpec,
    source: &dyn MomentSource,
    config: &QncConfig,
    support: &[usize],
) -> Result<(WeightVector, QncTrace)> {
    config.validate()?;
    let mut w = init_weights(model.num_data(), support)?;
    let mut trace = QncTrace::default();
    let mut best = f64::INFINITY;
    let mut stall = 0;
    let start = Instant::now();

    for k in 0..config.max_iters {
        let step = |e: Error| e.at_iteration(k);
        let moments = source
            .moments(model, &w, config.num_samples, derive_seed(config.seed, k as u64, "moments"))
            .map_err(step)?;
        let tau = if config.adaptive_tau { conditioned_tau(&moments.g_hat, config.tau, 1e8) } else { config.tau };
        let direction = newton_direction(&moments, tau).map_err(step)?;

        let line_search = if k <= config.k_tune {
            let seed = derive_seed(config.seed, k as u64, "line-search");
            Some(
                line_search_gamma(model, &w, &moments, &direction, config.gamma, source, config.num_samples, seed)
                    .map_err(step)?,
            )
        } else {
            None
        };
        let gamma = line_search.map_or(config.gamma, |l| l.gamma);

        let next = project(&w, &(w.values_vector() + &direction * gamma)).map_err(step)?;
        let step_norm = (next.values_vector() - w.values_vector()).norm();
        w = next;
        trace.records.push(IterationRecord {
            iteration: k,
            grad_norm: moments.grad_norm,
            gamma,
            tau,
            step_norm,
            active: w.active_count(),
            line_search,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("qnc k={k} grad_norm={:.4e} gamma={gamma} active={}", moments.grad_norm, w.active_count());

        if moments.grad_norm < config.stop_factor * best {
            best = moments.grad_norm;
            stall = 0;
        } else {
            best = best.min(moments.grad_norm);
            stall += 1;
            if stall >= config.stop_patience {
                trace.stopped_early = k + 1 < config.max_iters;
                break;
            }
        }
    }
    Ok((w, trace))
}
