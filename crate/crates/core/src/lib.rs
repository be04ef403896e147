//! Gaussian process dynamical mixture models.
//!
//! One emission GP maps a shared latent space to observations; one dynamical
//! GP per class models latent transitions. A prefix of a new sequence is
//! projected into the latent space, scored under every class expert, and the
//! Bayes posterior over classes picks the expert that continues it.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod data;
pub mod dynamics;
pub mod emission;
pub mod error;
pub mod geometry;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod optim;
pub mod params;
mod serde_mat;

pub use data::{resample, Dataset, Sequence};
pub use dynamics::{dynamics_gradients, dynamics_log_likelihood, fitc_fit, rollout, sequence_score, DynamicsModel, FitcState};
pub use emission::{emission_gradients, emission_log_likelihood, EmissionModel, LatentSeed};
pub use error::{Error, Result};
pub use geometry::{build_latent_init, fourier_features, pca_features, progression, LatentConfig, LatentInit, ProgressionVector};
pub use kernel::{kernel_eval, kernel_grad, KernelSpec, KernelTerm};
pub use linalg::{log_det_psd, psd_solve, GramMatrix};


pub use mixture::{posterior_from_scores, prefix_length, ClassificationResult, FitcSize, Generation, TrainOptions, TrainedGpdmm};
pub use metrics::{
    dampening, discrete_frechet, f1_score, frechet_avg, ldj, ldj_ratio, normalized_frechet, ClassMetrics, EvalItem, MetricsReport,
};
