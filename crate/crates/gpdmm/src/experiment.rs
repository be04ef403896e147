//! Evaluation, validation-based early stopping, MCCV and random search.

use gpdmm_core::mixture::TrainLogEntry;
use gpdmm_core::{prefix_length, Dataset, EvalItem, MetricsReport, TrainedGpdmm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::split::{mccv_split, Split};

/// Classification outcome for one evaluated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub index: usize,
    pub source_id: String,
    pub truth: String,
    pub predicted: String,
    /// `None` for pooled models, which generate with the true class.
    pub posterior: Option<Vec<f64>>,
    pub prefix_length: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub outcomes: Vec<Outcome>,
    pub items: Vec<EvalItem>,
}

/// Classifies the prefix of each listed sequence and generates its remainder.
pub fn evaluate(model: &TrainedGpdmm, dataset: &Dataset, indices: &[usize], prefix_fraction: f64, window: Option<usize>) -> AppResult<Evaluation> {
    if indices.is_empty() {
        return Err(AppError::Config("nothing to evaluate".into()));
    }
    if model.output_dims() != dataset.dim {
        return Err(AppError::Config(format!(
            "model expects {} features, dataset `{}` has {}",
            model.output_dims(),
            dataset.name,
            dataset.dim
        )));
    }
    if model.class_labels != dataset.classes {
        return Err(AppError::Config("model and dataset class lists differ".into()));
    }
    let results = indices
        .par_iter()
        .map(|&k| -> AppResult<(Outcome, EvalItem)> {
            let s = &dataset.sequences[k];
            let truth = dataset.class_of(k);
            let p = prefix_length(s.len(), prefix_fraction, model.order())?;
            let hint = model.pooled.then_some(truth);
            let g = model.generate(&s.slice(0, p), hint, s.len() - p)?;
            let (predicted, posterior) = match &g.classification {
                Some(c) => (c.predicted, Some(c.posterior.clone())),
                None => (truth, None),
            };
            let outcome = Outcome {
                index: k,
                source_id: s.source_id.clone(),
                truth: dataset.classes[truth].clone(),
                predicted: dataset.classes[predicted].clone(),
                posterior,
                prefix_length: p,
            };
            let item = EvalItem {
                truth_class: truth,
                predicted,
                generated: g.observations,
                remainder: s.slice(p, s.len()),
                sequence: s.values.clone(),
            };
            Ok((outcome, item))
        })
        .collect::<AppResult<Vec<_>>>()?;
    let (outcomes, items): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = MetricsReport::build(&items, &dataset.classes, dataset.sequences[0].dt, window)?;
    Ok(Evaluation { report, outcomes, items })
}

/// Orders validation reports: higher F1 first, then lower D_avg, with an
/// undefined D_avg last.
pub fn validation_better(a: &MetricsReport, b: &MetricsReport) -> bool {
    if a.f1_macro != b.f1_macro {
        return a.f1_macro > b.f1_macro;
    }
    match (a.frechet_avg, b.frechet_avg) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Relative D_avg slack under which a later round counts as no worse than
/// the best one seen.
pub const VALIDATION_TOLERANCE: f64 = 0.01;

/// True when `a` matches the F1 of `best` and its D_avg is within
/// [`VALIDATION_TOLERANCE`] of it.
pub fn validation_tied(a: &MetricsReport, best: &MetricsReport) -> bool {
    a.f1_macro == best.f1_macro
        && matches!((a.frechet_avg, best.frechet_avg), (Some(x), Some(y)) if x <= y * (1.0 + VALIDATION_TOLERANCE))
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: TrainedGpdmm,
    pub log: Vec<TrainLogEntry>,
    /// Round whose snapshot was kept; `None` without validation data.
    pub best_round: Option<usize>,
    pub rounds_run: usize,
    pub validation: Option<MetricsReport>,
}

/// Trains on the split's training sequences. With validation sequences the
/// model is scored after every round and the best round's snapshot is kept.
/// A later round tied with the best (see [`validation_tied`]) replaces it.
/// Training stops after `patience` rounds without a kept snapshot and skips
/// the final polish. Without validation data the full schedule runs.
pub fn train_run(dataset: &Dataset, split: &Split, cfg: &RunConfig) -> AppResult<TrainedRun> {
    let train = dataset.subset(&split.train)?;
    let latent = cfg.latent_config();
    let mut opts = cfg.train_options();
    if split.validation.is_empty() {
        let (model, log) = TrainedGpdmm::train(&train, &latent, &opts)?;
        let rounds_run = log.iter().map(|e| e.round).max().unwrap_or(0).min(cfg.rounds);
        return Ok(TrainedRun {
            model,
            log,
            best_round: None,
            rounds_run,
            validation: None,
        });
    }
    opts.polish_steps = 0;
    let mut best: Option<(usize, TrainedGpdmm, MetricsReport)> = None;
    let mut reference: Option<MetricsReport> = None;
    let mut first_error = None;
    let mut rounds_run = 0;
    let (_, log) = TrainedGpdmm::train_observed(&train, &latent, &opts, |round, snapshot| {
        rounds_run = round;
        match evaluate(snapshot, dataset, &split.validation, cfg.prefix_fraction, cfg.dampening_window) {
            Ok(ev) => {
                let improved = reference.as_ref().is_none_or(|r| validation_better(&ev.report, r));
                if improved {
                    reference = Some(ev.report.clone());
                }
                if improved || reference.as_ref().is_some_and(|r| validation_tied(&ev.report, r)) {
                    best = Some((round, snapshot.clone(), ev.report));
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
        let since = best.as_ref().map_or(round, |(r, _, _)| round - r);
        since < cfg.patience
    })?;
    match best {
        Some((round, model, report)) => Ok(TrainedRun {
            model,
            log,
            best_round: Some(round),
            rounds_run,
            validation: Some(report),
        }),
        None => Err(first_error.unwrap_or_else(|| AppError::Config("training ran no rounds".into()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    /// Number of iterations where the metric was defined.
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[Option<f64>]) -> Option<Stat> {
        let v: Vec<f64> = values.iter().flatten().copied().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub split_seed: u64,
    pub split: Split,
    pub best_round: Option<usize>,
    pub rounds_run: usize,
    pub validation: Option<MetricsReport>,
    pub test: MetricsReport,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub f1: Option<Stat>,
    pub frechet_avg: Option<Stat>,
    pub dampening_ratio: Option<Stat>,
    pub ldj_ratio: Option<Stat>,
    pub validation_f1: Option<Stat>,
    pub validation_frechet_avg: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccvReport {
    pub iterations: Vec<IterationReport>,
    pub aggregate: Aggregate,
}

/// Split seed of MCCV iteration `i`; iteration 0 uses the run seed itself.
pub fn iteration_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// One train/evaluate cycle on the split drawn from `split_seed`.
pub fn run_iteration(dataset: &Dataset, cfg: &RunConfig, iteration: usize, split_seed: u64) -> AppResult<IterationReport> {
    let split = mccv_split(dataset, split_seed, cfg.n_validation, cfg.n_test)?;
    let run = train_run(dataset, &split, cfg)?;
    let ev = evaluate(&run.model, dataset, &split.test, cfg.prefix_fraction, cfg.dampening_window)?;
    Ok(IterationReport {
        iteration,
        split_seed,
        split,
        best_round: run.best_round,
        rounds_run: run.rounds_run,
        validation: run.validation,
        test: ev.report,
        outcomes: ev.outcomes,
    })
}

pub fn run_mccv(dataset: &Dataset, cfg: &RunConfig) -> AppResult<MccvReport> {
    let iterations = (0..cfg.iterations)
        .into_par_iter()
        .map(|i| run_iteration(dataset, cfg, i, iteration_seed(cfg.seed, i)))
        .collect::<AppResult<Vec<_>>>()?;
    let pick = |f: &dyn Fn(&IterationReport) -> Option<f64>| Stat::of(&iterations.iter().map(f).collect::<Vec<_>>());
    let aggregate = Aggregate {
        f1: pick(&|r| Some(r.test.f1_macro)),
        frechet_avg: pick(&|r| r.test.frechet_avg),
        dampening_ratio: pick(&|r| r.test.dampening_ratio),
        ldj_ratio: pick(&|r| r.test.ldj_ratio),
        validation_f1: pick(&|r| r.validation.as_ref().map(|v| v.f1_macro)),
        validation_frechet_avg: pick(&|r| r.validation.as_ref().and_then(|v| v.frechet_avg)),
    };
    Ok(MccvReport { iterations, aggregate })
}

/// One sampled point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub fourier_order: usize,
    pub reduction_dims: usize,
    pub markov_order: usize,
    pub emission_variance: f64,
    pub dynamics_variance: f64,
    /// `None` for the full GP.
    pub fitc_fraction: Option<f64>,
}

impl Candidate {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            fourier_order: self.fourier_order,
            reduction_dims: self.reduction_dims,
            markov_order: self.markov_order,
            emission_variance: self.emission_variance,
            dynamics_variance: self.dynamics_variance,
            fitc_count: None,
            fitc_fraction: self.fitc_fraction,
            ..base.clone()
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    let (a, b) = (range[0].ln(), range[1].ln());
    if a == b {
        range[0]
    } else {
        rng.random_range(a..=b).exp()
    }
}

/// Draws `budget` candidates from the configured search space. Reduction
/// dimensions are capped at the feature count.
pub fn sample_candidates(cfg: &RunConfig, feature_count: usize) -> Vec<Candidate> {
    let s = &cfg.search;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_A2C4);
    (0..cfg.budget)
        .map(|_| {
            let fourier_order = rng.random_range(s.fourier_order[0]..=s.fourier_order[1]);
            let reduction_dims = rng.random_range(s.reduction_dims[0]..=s.reduction_dims[1]).min(feature_count);
            let markov_order = rng.random_range(s.markov_order[0]..=s.markov_order[1]);
            let emission_variance = log_uniform(&mut rng, s.emission_variance);
            let dynamics_variance = log_uniform(&mut rng, s.dynamics_variance);
            let f = s.fitc_fractions[rng.random_range(0..s.fitc_fractions.len())];
            Candidate {
                fourier_order,
                reduction_dims,
                markov_order,
                emission_variance,
                dynamics_variance,
                fitc_fraction: (f > 0.0).then_some(f),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub candidate_index: usize,
    pub candidate: Candidate,
    pub validation_f1: Option<f64>,
    pub validation_frechet_avg: Option<f64>,
    pub test_f1: Option<f64>,
    pub test_frechet_avg: Option<f64>,
    /// Set when the candidate failed to train or evaluate.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub entries: Vec<LeaderboardEntry>,
}

fn entry_order(a: &LeaderboardEntry, b: &LeaderboardEntry) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let f1 = |e: &LeaderboardEntry| e.validation_f1.unwrap_or(f64::NEG_INFINITY);
    let d = |e: &LeaderboardEntry| e.validation_frechet_avg.unwrap_or(f64::INFINITY);
    f1(b)
        .partial_cmp(&f1(a))
        .unwrap_or(Ordering::Equal)
        .then(d(a).partial_cmp(&d(b)).unwrap_or(Ordering::Equal))
        .then(a.candidate_index.cmp(&b.candidate_index))
}

/// Scores every candidate by its mean MCCV validation metrics and ranks by
/// validation F1, then validation D_avg.
pub fn run_search(dataset: &Dataset, cfg: &RunConfig) -> AppResult<Leaderboard> {
    let candidates = sample_candidates(cfg, dataset.dim);
    let mut entries: Vec<LeaderboardEntry> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let run_cfg = c.apply(cfg);
            let result = run_cfg.validate().and_then(|_| run_mccv(dataset, &run_cfg));
            let (a, error) = match result {
                Ok(r) => (Some(r.aggregate), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let mean = |s: Option<&Stat>| s.map(|s| s.mean);
            LeaderboardEntry {
                rank: 0,
                candidate_index: i,
                candidate: c.clone(),
                validation_f1: a.as_ref().and_then(|a| mean(a.validation_f1.as_ref())),
                validation_frechet_avg: a.as_ref().and_then(|a| mean(a.validation_frechet_avg.as_ref())),
                test_f1: a.as_ref().and_then(|a| mean(a.f1.as_ref())),
                test_frechet_avg: a.as_ref().and_then(|a| mean(a.frechet_avg.as_ref())),
                error,
            }
        })
        .collect();
    entries.sort_by(entry_order);
    for (r, e) in entries.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    Ok(Leaderboard { entries })
}
