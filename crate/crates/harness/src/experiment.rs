use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use coreqn_core::metrics::{fit_gaussian, gaussian_kl, ksd_imq, mmd_imq, relative_moment_errors};
use coreqn_core::oracle::ExactGaussianMoments;
use coreqn_core::rng::{derive_seed, rng_from_seed};
use coreqn_core::sampler::{laplace_full, sample_coreset_posterior, sample_full_posterior, DefaultSampler};
use coreqn_core::{
    run_qnc, unif_baseline, GaussianDistribution, ModelSpec, MomentSource, MonteCarloMoments, QncConfig, QncTrace,
    WeightVector,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::data::build_model;
use crate::error::{HarnessError, Result};
use crate::summary::{summarize, write_summary};

pub const RESULT_COLUMNS: [&str; 13] = [
    "method",
    "coreset_size",
    "trial",
    "reverse_kl",
    "forward_kl",
    "rel_mean_err",
    "rel_cov_err",
    "mmd",
    "ksd",
    "build_time_s",
    "sample_time_per_draw_s",
    "seed",
    "status",
];

/// Columns summarized per (method, coreset size).
pub const METRIC_COLUMNS: [&str; 8] = [
    "reverse_kl",
    "forward_kl",
    "rel_mean_err",
    "rel_cov_err",
    "mmd",
    "ksd",
    "build_time_s",
    "sample_time_per_draw_s",
];

/// Columns that depend on wall-clock time.
pub const TIMING_COLUMNS: [&str; 2] = ["build_time_s", "sample_time_per_draw_s"];

/// One (method, coreset size, trial) cell. Metric fields are `None` for
/// failed cells and for disabled metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub method: Method,
    pub coreset_size: usize,
    pub trial: usize,
    pub reverse_kl: Option<f64>,
    pub forward_kl: Option<f64>,
    pub rel_mean_err: Option<f64>,
    pub rel_cov_err: Option<f64>,
    pub mmd: Option<f64>,
    pub ksd: Option<f64>,
    pub build_time_s: f64,
    pub sample_time_per_draw_s: f64,
    pub seed: u64,
    /// `ok` or `error: <message>`.
    pub status: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

fn parse_opt(s: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("column {name}: cannot parse {s:?}"))
    }
}

impl ExperimentResult {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Values in the order of [`METRIC_COLUMNS`].
    pub fn metric_values(&self) -> [Option<f64>; 8] {
        [
            self.reverse_kl,
            self.forward_kl,
            self.rel_mean_err,
            self.rel_cov_err,
            self.mmd,
            self.ksd,
            Some(self.build_time_s),
            Some(self.sample_time_per_draw_s),
        ]
    }

    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.method.to_string(),
            self.coreset_size.to_string(),
            self.trial.to_string(),
            fmt_opt(self.reverse_kl),
            fmt_opt(self.forward_kl),
            fmt_opt(self.rel_mean_err),
            fmt_opt(self.rel_cov_err),
            fmt_opt(self.mmd),
            fmt_opt(self.ksd),
            format!("{:?}", self.build_time_s),
            format!("{:?}", self.sample_time_per_draw_s),
            self.seed.to_string(),
            self.status.clone(),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> std::result::Result<Self, String> {
        if r.len() != RESULT_COLUMNS.len() {
            return Err(format!("expected {} fields, found {}", RESULT_COLUMNS.len(), r.len()));
        }
        let num = |i: usize| -> std::result::Result<f64, String> {
            r[i].parse().map_err(|_| format!("column {}: cannot parse {:?}", RESULT_COLUMNS[i], &r[i]))
        };
        let int = |i: usize| -> std::result::Result<u64, String> {
            r[i].parse().map_err(|_| format!("column {}: cannot parse {:?}", RESULT_COLUMNS[i], &r[i]))
        };
        Ok(Self {
            method: Method::parse(&r[0]).ok_or_else(|| format!("unknown method {:?}", &r[0]))?,
            coreset_size: int(1)? as usize,
            trial: int(2)? as usize,
            reverse_kl: parse_opt(&r[3], RESULT_COLUMNS[3])?,
            forward_kl: parse_opt(&r[4], RESULT_COLUMNS[4])?,
            rel_mean_err: parse_opt(&r[5], RESULT_COLUMNS[5])?,
            rel_cov_err: parse_opt(&r[6], RESULT_COLUMNS[6])?,
            mmd: parse_opt(&r[7], RESULT_COLUMNS[7])?,
            ksd: parse_opt(&r[8], RESULT_COLUMNS[8])?,
            build_time_s: num(9)?,
            sample_time_per_draw_s: num(10)?,
            seed: int(11)?,
            status: r[12].to_string(),
        })
    }
}

/// Seed of a cell, mixing the master seed, coreset size, trial and method.
pub fn cell_seed(master: u64, method: Method, m: usize, trial: usize) -> u64 {
    derive_seed(master, ((m as u64) << 32) | trial as u64, method.as_str())
}

/// Seed of the subsample shared by QNC and UNIF in the same (M, trial).
pub fn subset_seed(master: u64, m: usize, trial: usize) -> u64 {
    derive_seed(master, ((m as u64) << 32) | trial as u64, "subset")
}

/// Full-posterior baseline: the exact posterior for conjugate models or a
/// Gaussian fit to HMC draws otherwise, plus draws for MMD.
#[derive(Debug, Clone)]
pub struct Reference {
    pub gaussian: GaussianDistribution,
    pub draws: DMatrix<f64>,
    pub exact: bool,
}

pub fn build_reference(model: &ModelSpec, config: &ExperimentConfig) -> Result<Reference> {
    let seed = derive_seed(config.seed, 0, "reference");
    let n = config.metrics.reference_samples;
    if model.is_conjugate() {
        let post = model.conjugate_coreset_posterior(&WeightVector::ones(model.num_data()))?;
        let draws = post.sample(n, &mut rng_from_seed(seed))?;
        Ok(Reference { gaussian: post, draws, exact: true })
    } else {
        let batch = sample_full_posterior(model, n, seed, &config.sampler)?;
        log::info!("reference HMC acceptance {:.3}", batch.acceptance_rate);
        let gaussian = fit_gaussian(&batch.draws)?;
        Ok(Reference { gaussian, draws: batch.draws, exact: false })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub coreset_size: usize,
    pub trial: usize,
}

/// Cells in output order: coreset size, then trial, then method.
pub fn cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &m in &config.coreset_sizes {
        for trial in 0..config.trials {
            for &method in &config.methods {
                out.push(Cell { method, coreset_size: m, trial });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct TraceFile<'a> {
    method: &'static str,
    coreset_size: usize,
    trial: usize,
    seed: u64,
    trace: &'a QncTrace,
    weights: &'a WeightVector,
}

pub fn trace_path(dir: &Path, method: Method, m: usize, trial: usize) -> PathBuf {
    dir.join(format!("trace_{}_{}_{}.json", method, m, trial))
}

struct Context<'a> {
    model: &'a ModelSpec,
    config: &'a ExperimentConfig,
    reference: &'a Reference,
    output_dir: &'a Path,
}

struct Approximation {
    gaussian: GaussianDistribution,
    draws: DMatrix<f64>,
    build_time_s: f64,
    sample_time_s: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t0 = Instant::now();
    let v = f()?;
    Ok((v, t0.elapsed().as_secs_f64()))
}

fn weighted_approximation(ctx: &Context, w: &WeightVector, seed: u64, build_time_s: f64) -> Result<Approximation> {
    let n = ctx.config.metrics.eval_samples;
    let model = ctx.model;
    let ((gaussian, draws), sample_time_s) = timed(|| {
        if model.is_conjugate() {
            let post = model.conjugate_coreset_posterior(w)?;
            let draws = post.sample(n, &mut rng_from_seed(seed))?;
            Ok((post, draws))
        } else {
            let batch = sample_coreset_posterior(model, w, n, seed, &ctx.config.sampler)?;
            Ok((fit_gaussian(&batch.draws)?, batch.draws))
        }
    })?;
    Ok(Approximation { gaussian, draws, build_time_s, sample_time_s })
}

fn build_approximation(ctx: &Context, cell: Cell, seed: u64) -> Result<(Approximation, Option<GaussianDistribution>)> {
    let model = ctx.model;
    let n = model.num_data();
    let eval_seed = derive_seed(seed, 0, "eval");
    let subset = subset_seed(ctx.config.seed, cell.coreset_size, cell.trial);
    match cell.method {
        Method::Qnc => {
            let qnc = QncConfig { coreset_size: cell.coreset_size, seed: subset, ..ctx.config.qnc };
            let mc = MonteCarloMoments { sampler: DefaultSampler { hmc: ctx.config.sampler } };
            let source: &dyn MomentSource = if ctx.config.exact_moments { &ExactGaussianMoments } else { &mc };
            let ((w, trace), build) = timed(|| Ok(run_qnc(model, source, &qnc)?))?;
            let file = TraceFile {
                method: cell.method.as_str(),
                coreset_size: cell.coreset_size,
                trial: cell.trial,
                seed: subset,
                trace: &trace,
                weights: &w,
            };
            let path = trace_path(ctx.output_dir, cell.method, cell.coreset_size, cell.trial);
            serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &file)?;
            Ok((weighted_approximation(ctx, &w, eval_seed, build)?, None))
        }
        Method::Unif => {
            let (w, build) = timed(|| Ok(unif_baseline(n, cell.coreset_size, subset)?))?;
            Ok((weighted_approximation(ctx, &w, eval_seed, build)?, None))
        }
        Method::Lap => {
            let (gaussian, build) = timed(|| Ok(laplace_full(model)?))?;
            let (draws, sample) =
                timed(|| Ok(gaussian.sample(ctx.config.metrics.eval_samples, &mut rng_from_seed(eval_seed))?))?;
            Ok((Approximation { gaussian, draws, build_time_s: build, sample_time_s: sample }, None))
        }
        Method::Full => {
            // Fit against fit: both sides carry the same Monte Carlo noise.
            let (batch, sample) = timed(|| {
                Ok(sample_full_posterior(model, ctx.config.metrics.eval_samples, eval_seed, &ctx.config.sampler)?)
            })?;
            let gaussian = fit_gaussian(&batch.draws)?;
            let truth = fit_gaussian(&ctx.reference.draws)?;
            Ok((Approximation { gaussian, draws: batch.draws, build_time_s: 0.0, sample_time_s: sample }, Some(truth)))
        }
    }
}

fn compute_cell(ctx: &Context, cell: Cell, seed: u64) -> Result<ExperimentResult> {
    let (approx, truth) = build_approximation(ctx, cell, seed)?;
    let truth = truth.as_ref().unwrap_or(&ctx.reference.gaussian);
    let m = &ctx.config.metrics;
    let reverse_kl = gaussian_kl(&approx.gaussian, truth)?;
    let forward_kl = gaussian_kl(truth, &approx.gaussian)?;
    let rel = relative_moment_errors(&approx.gaussian, truth)?;
    let mmd = if m.mmd { Some(mmd_imq(&approx.draws, &ctx.reference.draws, m.imq_c)?) } else { None };
    let ksd = if m.ksd {
        let model = ctx.model;
        let score = |theta: &[f64], g: &mut [f64]| {
            model.full_log_density(theta, g);
        };
        Some(ksd_imq(&approx.draws, score, m.imq_c, m.ksd_beta)?)
    } else {
        None
    };
    let row = coreqn_core::metrics::MetricsRow {
        reverse_kl,
        forward_kl,
        rel_mean_err: rel.rel_mean_err,
        rel_cov_err: rel.rel_cov_err,
        mmd,
        ksd,
        num_samples: approx.draws.nrows(),
        num_reference: ctx.reference.draws.nrows(),
    }
    .validated()?;
    Ok(ExperimentResult {
        method: cell.method,
        coreset_size: cell.coreset_size,
        trial: cell.trial,
        reverse_kl: Some(row.reverse_kl),
        forward_kl: Some(row.forward_kl),
        rel_mean_err: Some(row.rel_mean_err),
        rel_cov_err: Some(row.rel_cov_err),
        mmd: row.mmd,
        ksd: row.ksd,
        build_time_s: approx.build_time_s,
        sample_time_per_draw_s: approx.sample_time_s / approx.draws.nrows() as f64,
        seed,
        status: "ok".into(),
    })
}

fn run_cell(ctx: &Context, cell: Cell) -> ExperimentResult {
    let seed = cell_seed(ctx.config.seed, cell.method, cell.coreset_size, cell.trial);
    let outcome = catch_unwind(AssertUnwindSafe(|| compute_cell(ctx, cell, seed)));
    let message = match outcome {
        Ok(Ok(r)) => return r,
        Ok(Err(e)) => e.to_string(),
        Err(panic) => panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into()),
    };
    log::warn!("cell {} M={} trial={} failed: {message}", cell.method, cell.coreset_size, cell.trial);
    ExperimentResult {
        method: cell.method,
        coreset_size: cell.coreset_size,
        trial: cell.trial,
        reverse_kl: None,
        forward_kl: None,
        rel_mean_err: None,
        rel_cov_err: None,
        mmd: None,
        ksd: None,
        build_time_s: 0.0,
        sample_time_per_draw_s: 0.0,
        seed,
        status: format!("error: {message}"),
    }
}

/// `threads` if set, else `COREQN_THREADS`, else 0 (rayon picks).
pub fn resolve_threads(threads: Option<usize>) -> Result<usize> {
    if let Some(t) = threads {
        return Ok(t);
    }
    match std::env::var("COREQN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| HarnessError::config("COREQN_THREADS", format!("must be a positive integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<ExperimentResult>,
    pub failures: usize,
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Runs every cell and writes `results.csv`, `summary.csv` and the QNC
/// traces under `config.output_dir`. Rows are written in cell order as soon
/// as all earlier cells have finished, one flush per row.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let model = build_model(&config.problem, config.seed)?;
    config.check_sizes_against(model.num_data())?;
    std::fs::create_dir_all(&config.output_dir)?;
    log::info!("model {} N={} d={}", model.name(), model.num_data(), model.dim());

    let reference = build_reference(&model, config)?;
    let ctx = Context { model: &model, config, reference: &reference, output_dir: &config.output_dir };
    let cells = cells(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(config.threads)?)
        .build()
        .map_err(|e| HarnessError::config("threads", e.to_string()))?;

    let results_path = config.output_dir.join("results.csv");
    let mut writer = csv::Writer::from_path(&results_path)?;
    writer.write_record(RESULT_COLUMNS)?;
    writer.flush()?;

    let (tx, rx) = mpsc::channel::<(usize, ExperimentResult)>();
    let results = std::thread::scope(|scope| -> Result<Vec<ExperimentResult>> {
        let total = cells.len();
        let sink = scope.spawn(move || -> Result<Vec<ExperimentResult>> {
            let mut pending = BTreeMap::new();
            let mut out = Vec::with_capacity(total);
            for (i, row) in rx {
                pending.insert(i, row);
                while let Some(row) = pending.remove(&out.len()) {
                    writer.write_record(row.to_record())?;
                    writer.flush()?;
                    out.push(row);
                }
            }
            Ok(out)
        });
        pool.install(|| {
            cells.par_iter().enumerate().for_each_with(tx, |tx, (i, &cell)| {
                let row = run_cell(&ctx, cell);
                // The writer only hangs up after an I/O error, reported below.
                let _ = tx.send((i, row));
            })
        });
        sink.join().expect("result writer panicked")
    })?;

    let summary_path = config.output_dir.join("summary.csv");
    write_summary(&summarize(&results), File::create(&summary_path)?)?;
    let failures = results.iter().filter(|r| !r.is_ok()).count();
    Ok(ExperimentOutcome { results, failures, results_path, summary_path })
}
