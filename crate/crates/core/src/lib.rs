//! Bayesian coreset construction by uniform subsampling followed by
//! regularized quasi-Newton optimization of the coreset weights.
//!
//! The crate is organised around the pieces of the construction:
//!
//! * [`model`]: per-datum potentials, priors and closed-form coreset posteriors.
//! * [`sampler`]: exact and HMC draws from coreset posteriors, Laplace approximations.
//! * [`coreset`]: weight vectors, Monte Carlo moment estimates and the optimizer itself.
//! * [`oracle`]: closed-form moments and optimal weights for the Gaussian location model.
//! * [`metrics`]: Gaussian KL divergences, moment errors, IMQ MMD and kernel Stein discrepancy.

pub mod coreset;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sampler;

pub use coreset::{
    init_weights, project, run_qnc, run_qnc_on_support, uniform_subsample, unif_baseline,
    MomentEstimates, MomentSource, MonteCarloMoments, QncConfig, QncTrace, WeightVector,
};
pub use error::{Error, Result};
pub use gaussian::GaussianDistribution;
pub use model::ModelSpec;
pub use sampler::{HmcConfig, SampleBatch};
