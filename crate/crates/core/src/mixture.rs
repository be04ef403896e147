//! The mixture: one shared emission GP plus one dynamical expert per class,
//! trained jointly, gated by the Bayes posterior over classes.

use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::{exp, log as ln};

use crate::data::Dataset;
use crate::dynamics::{dyn_eval, rollout, scatter_transition_grads, sequence_score, stride_subsample, transitions, DynamicsModel, FitcState};
use crate::emission::{emission_eval, EmissionModel, LatentSeed};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{build_latent_init, LatentConfig};
use crate::kernel::KernelSpec;
use crate::optim::{maximize, OptimOptions};
use crate::params::HyperBounds;

/// Inducing-point budget per expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitcSize {
    Count(usize),
    /// Fraction of the expert's transition count, rounded down, at least 1.
    Fraction(f64),
}

impl FitcSize {
    pub fn resolve(&self, transitions: usize) -> usize {
        match *self {
            FitcSize::Count(m) => m,
            FitcSize::Fraction(f) => ((f * transitions as f64 + 1e-9) as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub emission_kernel: KernelSpec,
    pub dynamics_kernel: KernelSpec,
    /// Bounds for the emission hyperparameters.
    pub bounds: HyperBounds,
    pub dynamics_bounds: HyperBounds,
    /// Alternating rounds (latent/emission phase, then dynamics phase).
    pub rounds: usize,
    pub steps_per_phase: usize,
    /// Iterations of the final joint optimization over everything.
    pub polish_steps: usize,
    pub rel_tol: f64,
    pub fitc: Option<FitcSize>,
    /// One dynamical GP over all classes instead of one per class.
    pub pooled_dynamics: bool,
    /// Iteration cap for latent projection of new observations.
    pub infer_steps: usize,
    /// Adds the isotropic `N(0, I)` log-prior on latent rows, which pins
    /// the otherwise free latent scale.
    pub latent_prior: bool,
    /// Lower bound on the emission noise as a fraction of the mean
    /// per-feature variance of the training observations.
    pub emission_noise_floor: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            emission_kernel: KernelSpec::emission_default(),
            dynamics_kernel: KernelSpec::dynamics_default(),
            bounds: HyperBounds::default(),
            dynamics_bounds: HyperBounds::dynamics_default(),
            rounds: 40,
            steps_per_phase: 50,
            polish_steps: 200,
            rel_tol: 1e-7,
            fitc: None,
            pooled_dynamics: false,
            infer_steps: 200,
            latent_prior: true,
            emission_noise_floor: 1e-3,
        }
    }
}

/// Phase of the training schedule a log entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Latent,
    Dynamics,
    Polish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub round: usize,
    pub phase: Phase,
    pub step: usize,
    /// Joint objective (emission + all experts) after the accepted step.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedGpdmm {
    pub emission: EmissionModel,
    pub experts: Vec<DynamicsModel>,
    /// `p(a) = n_a / N`.
    pub priors: Vec<f64>,
    pub latent_config: LatentConfig,
    pub class_labels: Vec<String>,
    pub pooled: bool,
    pub infer_steps: usize,
    pub latent_prior: bool,
    /// Common length of the training sequences, which are stacked in order.
    pub train_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub posterior: Vec<f64>,
    pub predicted: usize,
    pub log_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Expert that produced the continuation.
    pub class_used: usize,
    pub classification: Option<ClassificationResult>,
    pub latent: DMatrix<f64>,
    pub observations: DMatrix<f64>,
}

/// `⌊fraction · length⌋` clamped to `[order + 1, length − 1]`.
pub fn prefix_length(length: usize, fraction: f64, order: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("prefix fraction {fraction} outside (0, 1)")));
    }
    if length < order + 2 {
        return Err(Error::TooShort(alloc::format!(
            "sequence of length {length} leaves no prefix and remainder at order {order}"
        )));
    }
    let raw = (fraction * length as f64 + 1e-9) as usize;
    Ok(raw.clamp(order + 1, length - 1))
}

/// Bayes posterior from per-class log-likelihoods, computed with
/// max-subtraction. Exact ties go to the lowest class index.
pub fn posterior_from_scores(priors: &[f64], log_scores: &[f64]) -> Result<ClassificationResult> {
    if priors.len() != log_scores.len() || priors.is_empty() {
        return Err(shape_err!("{} priors for {} scores", priors.len(), log_scores.len()));
    }
    let logs: Vec<f64> = priors
        .iter()
        .zip(log_scores)
        .map(|(p, s)| if *p > 0.0 { ln(*p) + s } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("all class scores are non-finite".into()));
    }
    let weights: Vec<f64> = logs.iter().map(|l| exp(l - max)).collect();
    let total: f64 = weights.iter().sum();
    let posterior: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut predicted = 0;
    for (a, l) in logs.iter().enumerate() {
        if *l > logs[predicted] {
            predicted = a;
        }
    }
    Ok(ClassificationResult {
        posterior,
        predicted,
        log_scores: log_scores.to_vec(),
    })
}

/// Per-expert training inputs: which sequences feed it and its parameters.
struct ExpertSlot {
    class_id: usize,
    sequences: Vec<usize>,
    kernel: KernelSpec,
    inducing: Option<DMatrix<f64>>,
}

struct Layout {
    n: usize,
    q: usize,
    length: usize,
    order: usize,
}

impl Layout {
    fn segments(&self, x: &DMatrix<f64>, seqs: &[usize]) -> Vec<DMatrix<f64>> {
        seqs.iter().map(|&s| x.rows(s * self.length, self.length).into_owned()).collect()
    }
}

/// Joint objective and the gradient w.r.t. the latent rows.
fn joint_value(
    layout: &Layout,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    emission_kernel: &KernelSpec,
    slots: &[ExpertSlot],
    latent_prior: bool,
    want_x_grad: bool,
    want_emission_grad: bool,
) -> Result<(f64, DMatrix<f64>, Vec<f64>)> {
    let e = emission_eval(x, y, emission_kernel, want_x_grad || want_emission_grad)?;
    let mut value = e.value;
    let mut d_x = if want_x_grad { e.d_x } else { DMatrix::zeros(0, 0) };
    if latent_prior {
        value -= 0.5 * x.norm_squared();
        if want_x_grad {
            d_x -= x;
        }
    }
    for slot in slots {
        let segs = layout.segments(x, &slot.sequences);
        let t = transitions(&segs, layout.order)?;
        let de = dyn_eval(&t.x_in, &t.x_out, &slot.kernel, slot.inducing.as_ref(), want_x_grad)?;
        value += de.value;
        if want_x_grad {
            let lens: Vec<usize> = segs.iter().map(|s| s.nrows()).collect();
            let grads = scatter_transition_grads(&de.d_in, &de.d_out, &lens, layout.order, layout.q);
            for (&s, g) in slot.sequences.iter().zip(grads) {
                let mut rows = d_x.rows_mut(s * layout.length, layout.length);
                rows += g;
            }
        }
    }
    Ok((value, d_x, e.d_params))
}

fn expert_objective(layout: &Layout, x: &DMatrix<f64>, slot: &ExpertSlot, kernel: &KernelSpec, inducing: Option<&DMatrix<f64>>) -> Result<(f64, Vec<f64>, Option<DMatrix<f64>>)> {
    let segs = layout.segments(x, &slot.sequences);
    let t = transitions(&segs, layout.order)?;
    let e = dyn_eval(&t.x_in, &t.x_out, kernel, inducing, true)?;
    Ok((e.value, e.d_params, e.d_inducing))
}

struct State {
    x: DMatrix<f64>,
    emission_kernel: KernelSpec,
    slots: Vec<ExpertSlot>,
}

impl TrainedGpdmm {
    /// Initializes latents from the geometry and optimizes the joint
    /// objective (emission + every expert).
    pub fn train(dataset: &Dataset, config: &LatentConfig, opts: &TrainOptions) -> Result<(TrainedGpdmm, Vec<TrainLogEntry>)> {
        TrainedGpdmm::train_observed(dataset, config, opts, |_, _| true)
    }

    /// Like [`TrainedGpdmm::train`], calling `observer(round, snapshot)`
    /// after every alternating round; returning `false` stops training
    /// early (the polish phase is skipped).
    pub fn train_observed<F>(dataset: &Dataset, config: &LatentConfig, opts: &TrainOptions, mut observer: F) -> Result<(TrainedGpdmm, Vec<TrainLogEntry>)>
    where
        F: FnMut(usize, &TrainedGpdmm) -> bool,
    {
        config.validate()?;
        opts.emission_kernel.validate()?;
        opts.dynamics_kernel.validate()?;
        let a_count = dataset.n_classes();
        let mut per_class: Vec<Vec<usize>> = alloc::vec![Vec::new(); a_count];
        for k in 0..dataset.sequences.len() {
            per_class[dataset.class_of(k)].push(k);
        }
        for (a, seqs) in per_class.iter().enumerate() {
            if seqs.is_empty() {
                return Err(Error::MissingClass(dataset.classes[a].clone()));
            }
        }
        let layout = Layout {
            n: dataset.sequences.len() * dataset.length,
            q: config.latent_dims(),
            length: dataset.length,
            order: config.markov_order,
        };
        if layout.length <= layout.order {
            return Err(Error::TooShort("sequences too short for the Markov order".into()));
        }
        let init = build_latent_init(dataset, config)?;
        let y_raw = dataset.stacked();
        let y_mean = y_raw.row_mean().transpose();
        let mut y = y_raw;
        for mut row in y.row_iter_mut() {
            row -= y_mean.transpose();
        }
        let feature_var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let mut emission_bounds = opts.bounds;
        emission_bounds.noise.lo = emission_bounds.noise.lo.max(opts.emission_noise_floor * feature_var);
        if emission_bounds.noise.lo >= emission_bounds.noise.hi {
            return Err(Error::InvalidArgument("emission noise floor exceeds its upper bound".into()));
        }
        let emission_kernel = opts.emission_kernel.clone();
        let total_points = layout.n as f64;
        let priors: Vec<f64> = per_class.iter().map(|s| (s.len() * layout.length) as f64 / total_points).collect();

        let groups: Vec<(usize, Vec<usize>)> = if opts.pooled_dynamics {
            alloc::vec![(0, (0..dataset.sequences.len()).collect())]
        } else {
            per_class.into_iter().enumerate().collect()
        };
        let mut slots = Vec::with_capacity(groups.len());
        for (class_id, sequences) in groups {
            let inducing = match opts.fitc {
                None => None,
                Some(size) => {
                    let segs = layout.segments(&init.x, &sequences);
                    let t = transitions(&segs, layout.order)?;
                    Some(stride_subsample(&t.x_in, size.resolve(t.x_in.nrows()))?)
                }
            };
            slots.push(ExpertSlot {
                class_id,
                sequences,
                kernel: opts.dynamics_kernel.clone(),
                inducing,
            });
        }
        let mut state = State {
            x: init.x,
            emission_kernel,
            slots,
        };
        let mut log = Vec::new();
        let (f0, _, _) = joint_value(&layout, &state.x, &y, &state.emission_kernel, &state.slots, opts.latent_prior, false, false)?;
        if !f0.is_finite() {
            return Err(Error::Divergence { iteration: 0 });
        }
        log.push(TrainLogEntry {
            round: 0,
            phase: Phase::Init,
            step: 0,
            objective: f0,
        });
        let mut current = f0;
        let assemble = |state: &State| -> Result<TrainedGpdmm> {
            let emission = EmissionModel::from_centered(state.x.clone(), y_mean.clone(), y.clone(), state.emission_kernel.clone())?;
            let mut experts = Vec::with_capacity(state.slots.len());
            for slot in &state.slots {
                let segs = layout.segments(&state.x, &slot.sequences);
                experts.push(DynamicsModel::from_segments(
                    slot.class_id,
                    layout.order,
                    &segs,
                    slot.kernel.clone(),
                    slot.inducing.clone().map(|inducing| FitcState { inducing }),
                )?);
            }
            Ok(TrainedGpdmm {
                emission,
                experts,
                priors: priors.clone(),
                latent_config: config.clone(),
                class_labels: dataset.classes.clone(),
                pooled: opts.pooled_dynamics,
                infer_steps: opts.infer_steps,
                latent_prior: opts.latent_prior,
                train_length: layout.length,
            })
        };

        let phase_opts = OptimOptions {
            max_iters: opts.steps_per_phase,
            rel_tol: opts.rel_tol,
            ..OptimOptions::default()
        };
        let mut stopped = false;
        for round in 1..=opts.rounds {
            let before = current;
            current = latent_phase(&layout, &y, &mut state, &emission_bounds, &opts.dynamics_bounds, &phase_opts, false, opts.latent_prior, round, Phase::Latent, &mut log)?;
            current = dynamics_phase(&layout, &y, &mut state, &opts.dynamics_bounds, &phase_opts, round, current, &mut log)?;
            let snapshot = assemble(&state)?;
            if !observer(round, &snapshot) {
                stopped = true;
                break;
            }
            if current - before <= opts.rel_tol * current.abs().max(1.0) {
                break;
            }
        }
        if !stopped && opts.polish_steps > 0 {
            let polish = OptimOptions {
                max_iters: opts.polish_steps,
                rel_tol: opts.rel_tol,
                ..OptimOptions::default()
            };
            latent_phase(&layout, &y, &mut state, &emission_bounds, &opts.dynamics_bounds, &polish, true, opts.latent_prior, opts.rounds + 1, Phase::Polish, &mut log)?;
        }
        Ok((assemble(&state)?, log))
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn order(&self) -> usize {
        self.latent_config.markov_order
    }

    pub fn output_dims(&self) -> usize {
        self.emission.output_dims()
    }

    pub fn expert_for(&self, class: usize) -> &DynamicsModel {
        if self.pooled {
            &self.experts[0]
        } else {
            &self.experts[class]
        }
    }

    fn infer_opts(&self) -> OptimOptions {
        OptimOptions::default().with_max_iters(self.infer_steps)
    }

    fn check_prefix(&self, y_prefix: &DMatrix<f64>) -> Result<()> {
        if y_prefix.ncols() != self.output_dims() {
            return Err(shape_err!("prefix has {} features, model {}", y_prefix.ncols(), self.output_dims()));
        }
        if y_prefix.nrows() <= self.order() {
            return Err(Error::TooShort(alloc::format!(
                "prefix of {} steps cannot be scored at Markov order {}",
                y_prefix.nrows(),
                self.order()
            )));
        }
        Ok(())
    }

    /// Latent seed for projecting `y_prefix`: training latents picked by a
    /// monotone alignment of the prefix against each training sequence.
    ///
    /// Prefix row `t` maps to training row `j_t` with `j_0` at most a quarter
    /// of the prefix length and `j_t − j_{t−1} ∈ {0, 1, 2}`; the path with the
    /// least summed squared observation distance wins (earliest sequence on
    /// ties). Pointwise nearest neighbours are ambiguous for periodic
    /// motions, where every cycle repeats the same poses.
    pub fn alignment_seed(&self, y_prefix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t_rows = y_prefix.nrows();
        let len = self.train_length;
        if t_rows == 0 || len == 0 {
            return Err(Error::TooShort("empty prefix or training set".into()));
        }
        let n_seq = self.emission.n_points() / len;
        let max_start = (t_rows / 4).min(len - 1);
        let yc = &self.emission.y_centered;
        let cost = |t: usize, row: usize| -> f64 {
            let mut c = 0.0;
            for d in 0..yc.ncols() {
                let diff = y_prefix[(t, d)] - self.emission.y_mean[d] - yc[(row, d)];
                c += diff * diff;
            }
            c
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut acc = alloc::vec![f64::INFINITY; t_rows * len];
        let mut from = alloc::vec![0u8; t_rows * len];
        for k in 0..n_seq {
            let base = k * len;
            acc.iter_mut().for_each(|v| *v = f64::INFINITY);
            for j in 0..=max_start {
                acc[j] = cost(0, base + j);
            }
            for t in 1..t_rows {
                for j in 0..len {
                    let mut m = (acc[(t - 1) * len + j], 0u8);
                    for step in 1..=2u8 {
                        if j >= step as usize {
                            let v = acc[(t - 1) * len + j - step as usize];
                            if v < m.0 {
                                m = (v, step);
                            }
                        }
                    }
                    if m.0.is_finite() {
                        acc[t * len + j] = m.0 + cost(t, base + j);
                        from[t * len + j] = m.1;
                    }
                }
            }
            let last = (t_rows - 1) * len;
            let mut end = 0;
            for j in 1..len {
                if acc[last + j] < acc[last + end] {
                    end = j;
                }
            }
            let total = acc[last + end];
            if best.as_ref().is_none_or(|b| total < b.0) {
                let mut path = alloc::vec![0usize; t_rows];
                let mut j = end;
                for t in (0..t_rows).rev() {
                    path[t] = base + j;
                    if t > 0 {
                        j -= from[t * len + j] as usize;
                    }
                }
                best = Some((total, path));
            }
        }
        let (_, path) = best.ok_or_else(|| Error::NonFinite("no alignment found".into()))?;
        let mut seed = DMatrix::zeros(t_rows, self.emission.latent_dims());
        for (t, &row) in path.iter().enumerate() {
            seed.row_mut(t).copy_from(&self.emission.x.row(row));
        }
        Ok(seed)
    }

    /// Emission-only projection of observations into the latent space,
    /// started from [`TrainedGpdmm::alignment_seed`].
    pub fn project(&self, y_prefix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let seed = LatentSeed::Provided(self.alignment_seed(y_prefix)?);
        Ok(self.emission.infer_latent(y_prefix, &seed, &self.infer_opts())?.x)
    }

    /// Scores already-projected latent rows under every class expert.
    pub fn classify_latent(&self, x_star: &DMatrix<f64>) -> Result<ClassificationResult> {
        let scores = (0..self.n_classes())
            .map(|a| sequence_score(self.expert_for(a), x_star))
            .collect::<Result<Vec<f64>>>()?;
        posterior_from_scores(&self.priors, &scores)
    }

    pub fn classify(&self, y_prefix: &DMatrix<f64>) -> Result<ClassificationResult> {
        self.check_prefix(y_prefix)?;
        self.classify_latent(&self.project(y_prefix)?)
    }

    /// Continues `y_prefix` for `horizon` steps with the hinted class's
    /// expert, or the predicted class when no hint is given.
    pub fn generate(&self, y_prefix: &DMatrix<f64>, class_hint: Option<usize>, horizon: usize) -> Result<Generation> {
        self.check_prefix(y_prefix)?;
        if let Some(c) = class_hint {
            if c >= self.n_classes() {
                return Err(Error::InvalidArgument(alloc::format!("class hint {c} out of range")));
            }
        }
        let x_star = self.project(y_prefix)?;
        let (class_used, classification) = match class_hint {
            Some(c) => (c, None),
            None => {
                let r = self.classify_latent(&x_star)?;
                (r.predicted, Some(r))
            }
        };
        let latent = rollout(self.expert_for(class_used), &x_star, horizon)?;
        let observations = if horizon == 0 {
            DMatrix::zeros(0, self.output_dims())
        } else {
            self.emission.predict(&latent)?.0
        };
        Ok(Generation {
            class_used,
            classification,
            latent,
            observations,
        })
    }

    /// Joint objective of the assembled model.
    pub fn objective(&self) -> Result<f64> {
        let mut v = self.emission.log_likelihood();
        if self.latent_prior {
            v -= 0.5 * self.emission.x.norm_squared();
        }
        for e in &self.experts {
            v += e.log_likelihood()?;
        }
        Ok(v)
    }
}

/// Optimizes latents and emission hyperparameters (and, when `all` is set,
/// every expert's hyperparameters and inducing inputs too).
#[allow(clippy::too_many_arguments)]
fn latent_phase(
    layout: &Layout,
    y: &DMatrix<f64>,
    state: &mut State,
    bounds: &HyperBounds,
    dyn_bounds: &HyperBounds,
    opts: &OptimOptions,
    all: bool,
    latent_prior: bool,
    round: usize,
    phase: Phase,
    log: &mut Vec<TrainLogEntry>,
) -> Result<f64> {
    let nx = layout.n * layout.q;
    let ne = state.emission_kernel.n_params();
    let expert_sizes: Vec<(usize, usize)> = state
        .slots
        .iter()
        .map(|s| (s.kernel.n_params(), if all { s.inducing.as_ref().map_or(0, |z| z.len()) } else { 0 }))
        .collect();
    let extra: usize = if all { expert_sizes.iter().map(|(p, z)| p + z).sum() } else { 0 };
    let mut start = DVector::zeros(nx + ne + extra);
    start.rows_mut(0, nx).copy_from_slice(state.x.as_slice());
    start.rows_mut(nx, ne).copy_from_slice(&bounds.encode(&state.emission_kernel));
    if all {
        let mut off = nx + ne;
        for (slot, (np, nz)) in state.slots.iter().zip(&expert_sizes) {
            start.rows_mut(off, *np).copy_from_slice(&dyn_bounds.encode(&slot.kernel));
            off += np;
            if *nz > 0 {
                start.rows_mut(off, *nz).copy_from_slice(slot.inducing.as_ref().unwrap().as_slice());
                off += nz;
            }
        }
    }
    let mut work_e = state.emission_kernel.clone();
    let mut work_slots: Vec<ExpertSlot> = state
        .slots
        .iter()
        .map(|s| ExpertSlot {
            class_id: s.class_id,
            sequences: s.sequences.clone(),
            kernel: s.kernel.clone(),
            inducing: s.inducing.clone(),
        })
        .collect();
    let out = maximize(
        |p| {
            let x = DMatrix::from_column_slice(layout.n, layout.q, &p.as_slice()[..nx]);
            let jac_e = bounds.decode(&mut work_e, &p.as_slice()[nx..nx + ne]);
            let mut jacs = Vec::new();
            if all {
                let mut off = nx + ne;
                for (slot, (np, nz)) in work_slots.iter_mut().zip(&expert_sizes) {
                    jacs.push(dyn_bounds.decode(&mut slot.kernel, &p.as_slice()[off..off + np]));
                    off += np;
                    if *nz > 0 {
                        let z = slot.inducing.as_mut().unwrap();
                        let (r, c) = z.shape();
                        *z = DMatrix::from_column_slice(r, c, &p.as_slice()[off..off + nz]);
                        off += nz;
                    }
                }
            }
            let (value, d_x, d_e) = joint_value(layout, &x, y, &work_e, &work_slots, latent_prior, true, true)?;
            let mut g = DVector::zeros(nx + ne + extra);
            g.rows_mut(0, nx).copy_from_slice(d_x.as_slice());
            for i in 0..ne {
                g[nx + i] = d_e[i] * jac_e[i];
            }
            if all {
                let mut off = nx + ne;
                for ((slot, (np, nz)), jac) in work_slots.iter().zip(&expert_sizes).zip(&jacs) {
                    let (_, d_p, d_z) = expert_objective(layout, &x, slot, &slot.kernel, slot.inducing.as_ref())?;
                    for i in 0..*np {
                        g[off + i] = d_p[i] * jac[i];
                    }
                    off += np;
                    if *nz > 0 {
                        g.rows_mut(off, *nz).copy_from_slice(d_z.unwrap().as_slice());
                        off += nz;
                    }
                }
            }
            Ok((value, g))
        },
        start,
        opts,
    )
    .map_err(|e| match e {
        Error::Divergence { .. } => Error::Divergence { iteration: log.len() },
        other => other,
    })?;
    state.x = DMatrix::from_column_slice(layout.n, layout.q, &out.x.as_slice()[..nx]);
    bounds.decode(&mut state.emission_kernel, &out.x.as_slice()[nx..nx + ne]);
    if all {
        let mut off = nx + ne;
        for (slot, (np, nz)) in state.slots.iter_mut().zip(&expert_sizes) {
            dyn_bounds.decode(&mut slot.kernel, &out.x.as_slice()[off..off + np]);
            off += np;
            if *nz > 0 {
                let z = slot.inducing.as_mut().unwrap();
                let (r, c) = z.shape();
                *z = DMatrix::from_column_slice(r, c, &out.x.as_slice()[off..off + nz]);
                off += nz;
            }
        }
    }
    for (step, v) in out.trace.iter().enumerate().skip(1) {
        log.push(TrainLogEntry {
            round,
            phase,
            step,
            objective: *v,
        });
    }
    Ok(out.value)
}

/// Optimizes each expert's hyperparameters (and inducing inputs) with the
/// latents fixed. Experts are independent here.
#[allow(clippy::too_many_arguments)]
fn dynamics_phase(
    layout: &Layout,
    y: &DMatrix<f64>,
    state: &mut State,
    bounds: &HyperBounds,
    opts: &OptimOptions,
    round: usize,
    current: f64,
    log: &mut Vec<TrainLogEntry>,
) -> Result<f64> {
    let mut total = current;
    let x = state.x.clone();
    for slot in state.slots.iter_mut() {
        let np = slot.kernel.n_params();
        let nz = slot.inducing.as_ref().map_or(0, |z| z.len());
        let zshape = slot.inducing.as_ref().map(|z| z.shape());
        let mut start = DVector::zeros(np + nz);
        start.rows_mut(0, np).copy_from_slice(&bounds.encode(&slot.kernel));
        if nz > 0 {
            start.rows_mut(np, nz).copy_from_slice(slot.inducing.as_ref().unwrap().as_slice());
        }
        let mut work = slot.kernel.clone();
        let out = maximize(
            |p| {
                let jac = bounds.decode(&mut work, &p.as_slice()[..np]);
                let z = zshape.map(|(r, c)| DMatrix::from_column_slice(r, c, &p.as_slice()[np..]));
                let (v, d_p, d_z) = expert_objective(layout, &x, slot, &work, z.as_ref())?;
                let mut g = DVector::zeros(np + nz);
                for i in 0..np {
                    g[i] = d_p[i] * jac[i];
                }
                if let Some(dz) = d_z {
                    g.rows_mut(np, nz).copy_from_slice(dz.as_slice());
                }
                Ok((v, g))
            },
            start,
            opts,
        )?;
        bounds.decode(&mut slot.kernel, &out.x.as_slice()[..np]);
        if let Some((r, c)) = zshape {
            slot.inducing = Some(DMatrix::from_column_slice(r, c, &out.x.as_slice()[np..]));
        }
        let gain = out.value - out.trace[0];
        for (step, v) in out.trace.iter().enumerate().skip(1) {
            log.push(TrainLogEntry {
                round,
                phase: Phase::Dynamics,
                step,
                objective: total + (v - out.trace[0]),
            });
        }
        total += gain;
    }
    let _ = y;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn prefix_lengths() {
        assert_eq!(prefix_length(100, 0.40, 1).unwrap(), 40);
        assert_eq!(prefix_length(100, 0.15, 1).unwrap(), 15);
        assert_eq!(prefix_length(10, 0.05, 1).unwrap(), 2);
        assert_eq!(prefix_length(200, 0.15, 1).unwrap(), 30);
        assert!(prefix_length(2, 0.5, 1).is_err());
        assert!(prefix_length(100, 1.0, 1).is_err());
    }

    #[test]
    fn posterior_symmetry_and_priors() {
        let r = posterior_from_scores(&[0.5, 0.5], &[-3.0, -3.0]).unwrap();
        assert_eq!(r.posterior, vec![0.5, 0.5]);
        assert_eq!(r.predicted, 0);
        let r = posterior_from_scores(&[0.75, 0.25], &[1.0, 1.0]).unwrap();
        assert!((r.posterior[0] - 0.75).abs() < 1e-15 && (r.posterior[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let r = posterior_from_scores(&[0.25; 4], &[-1e4, 0.0, -800.0, -5000.0]).unwrap();
        assert!(r.posterior.iter().all(|p| p.is_finite()));
        assert_eq!(r.predicted, 1);
        assert!((r.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifting_all_scores_keeps_argmax() {
        let scores = [-4.0, -2.5, -7.0];
        let base = posterior_from_scores(&[0.2, 0.3, 0.5], &scores).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 1234.5).collect();
        let r = posterior_from_scores(&[0.2, 0.3, 0.5], &shifted).unwrap();
        assert_eq!(r.predicted, base.predicted);
    }

    #[test]
    fn fitc_size_resolution() {
        assert_eq!(FitcSize::Fraction(0.5).resolve(59), 29);
        assert_eq!(FitcSize::Fraction(0.001).resolve(59), 1);
        assert_eq!(FitcSize::Count(7).resolve(59), 7);
    }
}
