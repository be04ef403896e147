//! Run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use gpdmm_core::{FitcSize, KernelSpec, KernelTerm, LatentConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Ranges sampled by `search`. Integer ranges are inclusive; variance
/// ranges are sampled log-uniformly. A FITC fraction of 0 means the full GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub fourier_order: [usize; 2],
    pub reduction_dims: [usize; 2],
    pub markov_order: [usize; 2],
    pub emission_variance: [f64; 2],
    pub dynamics_variance: [f64; 2],
    pub fitc_fractions: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            fourier_order: [1, 3],
            reduction_dims: [2, 8],
            markov_order: [1, 2],
            emission_variance: [0.1, 10.0],
            dynamics_variance: [0.1, 10.0],
            fitc_fractions: vec![0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub fourier_order: usize,
    pub include_constant: bool,
    pub reduction_dims: usize,
    pub markov_order: usize,
    /// Fraction of each test sequence used as the classification prefix.
    pub prefix_fraction: f64,
    pub fitc_count: Option<usize>,
    pub fitc_fraction: Option<f64>,
    /// Train one dynamical GP on all classes instead of one per class.
    pub pooled: bool,
    pub rounds: usize,
    pub steps_per_phase: usize,
    pub polish_steps: usize,
    pub infer_steps: usize,
    /// Rounds without a validation improvement before training stops.
    pub patience: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub iterations: usize,
    pub budget: usize,
    pub dampening_window: Option<usize>,
    /// Initial rbf variance of the emission kernel.
    pub emission_variance: f64,
    /// Initial rbf variance of the dynamics kernels.
    pub dynamics_variance: f64,
    pub plots: bool,
    pub search: SearchSpace,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            fourier_order: 1,
            include_constant: true,
            reduction_dims: 6,
            markov_order: 1,
            prefix_fraction: 0.4,
            fitc_count: None,
            fitc_fraction: None,
            pooled: false,
            rounds: 40,
            steps_per_phase: 50,
            polish_steps: 200,
            infer_steps: 200,
            patience: 5,
            n_validation: 2,
            n_test: 5,
            iterations: 3,
            budget: 8,
            dampening_window: None,
            emission_variance: 1.0,
            dynamics_variance: 1.0,
            plots: false,
            search: SearchSpace::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML config; missing keys take their defaults.
    pub fn read(path: &Path) -> AppResult<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: &str| Err(AppError::Config(m.to_string()));
        if !(self.prefix_fraction > 0.0 && self.prefix_fraction < 1.0) {
            return bad("prefix_fraction must lie strictly between 0 and 1");
        }
        if self.fitc_count.is_some() && self.fitc_fraction.is_some() {
            return bad("set at most one of fitc_count and fitc_fraction");
        }
        if self.fitc_count == Some(0) {
            return bad("fitc_count must be positive");
        }
        if let Some(f) = self.fitc_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("fitc_fraction must lie in (0, 1]");
            }
        }
        if self.rounds == 0 || self.steps_per_phase == 0 {
            return bad("rounds and steps_per_phase must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.n_test == 0 {
            return bad("n_test must be positive");
        }
        if self.iterations == 0 || self.budget == 0 {
            return bad("iterations and budget must be positive");
        }
        if !(self.emission_variance > 0.0 && self.dynamics_variance > 0.0) {
            return bad("kernel variances must be positive");
        }
        let s = &self.search;
        if s.fourier_order[0] > s.fourier_order[1]
            || s.reduction_dims[0] > s.reduction_dims[1]
            || s.markov_order[0] > s.markov_order[1]
            || s.markov_order[0] == 0
            || s.markov_order[1] > 2
            || !(s.emission_variance[0] > 0.0 && s.emission_variance[0] <= s.emission_variance[1])
            || !(s.dynamics_variance[0] > 0.0 && s.dynamics_variance[0] <= s.dynamics_variance[1])
            || s.fitc_fractions.is_empty()
            || s.fitc_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("search space is empty or malformed");
        }
        self.latent_config().validate()?;
        Ok(())
    }

    pub fn latent_config(&self) -> LatentConfig {
        LatentConfig {
            fourier_order: self.fourier_order,
            include_constant: self.include_constant,
            reduction_dims: self.reduction_dims,
            markov_order: self.markov_order,
            epsilon: None,
        }
    }

    pub fn fitc(&self) -> Option<FitcSize> {
        match (self.fitc_count, self.fitc_fraction) {
            (Some(m), _) => Some(FitcSize::Count(m)),
            (None, Some(f)) => Some(FitcSize::Fraction(f)),
            _ => None,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let mut opts = TrainOptions {
            rounds: self.rounds,
            steps_per_phase: self.steps_per_phase,
            polish_steps: self.polish_steps,
            infer_steps: self.infer_steps,
            fitc: self.fitc(),
            pooled_dynamics: self.pooled,
            ..TrainOptions::default()
        };
        set_rbf_variance(&mut opts.emission_kernel, self.emission_variance);
        set_rbf_variance(&mut opts.dynamics_kernel, self.dynamics_variance);
        opts
    }

    pub fn manifest_path(&self) -> AppResult<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| AppError::Usage("no dataset manifest given (set `manifest` or pass --manifest)".into()))
    }
}

fn set_rbf_variance(kernel: &mut KernelSpec, value: f64) {
    for t in &mut kernel.terms {
        if let KernelTerm::Rbf { variance, .. } = t {
            *variance = value;
        }
    }
}
