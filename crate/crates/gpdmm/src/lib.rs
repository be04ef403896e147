//! Data handling, experiments and the command-line front end for GPDMM.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model_io;
pub mod plots;
pub mod report;
pub mod split;
pub mod synth;

pub use config::{RunConfig, SearchSpace};
pub use error::{AppError, AppResult};
pub use experiment::{evaluate, run_mccv, run_search, train_run, Evaluation, MccvReport, TrainedRun};
pub use io::{load_dataset, write_dataset, Manifest};
pub use model_io::{load_model, save_model};
pub use split::{mccv_split, Split};
pub use synth::{synth_generate, SynthClass, SynthSpec};
