//! Per-class dynamical GPs: autoregressive latent transitions, the sequence
//! likelihood used for classification, mean rollouts and the FITC sparse
//! approximation.

use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::{log as ln, sqrt};

use crate::error::{shape_err, Error, Result};
use crate::kernel::{KernelSpec, KernelTerm};
use crate::linalg::{GramMatrix, PsdFactor};
use crate::optim::{maximize, OptimOptions};
use crate::params::HyperBounds;

/// Autoregressive inputs and outputs built from one or more latent segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    /// Rows are `[x_{t−order+1}, …, x_t]`, oldest first.
    pub x_in: DMatrix<f64>,
    pub x_out: DMatrix<f64>,
}

/// Builds transitions inside each segment; no transition crosses a segment
/// boundary.
pub fn transitions(segments: &[DMatrix<f64>], order: usize) -> Result<TransitionSet> {
    if order == 0 {
        return Err(Error::InvalidArgument("Markov order must be positive".into()));
    }
    let q = segments.first().map(|s| s.ncols()).unwrap_or(0);
    let mut rows = 0;
    for s in segments {
        if s.ncols() != q {
            return Err(shape_err!("segments have {} and {} latent columns", s.ncols(), q));
        }
        if s.nrows() <= order {
            return Err(Error::TooShort(alloc::format!(
                "segment with {} rows cannot form order-{order} transitions",
                s.nrows()
            )));
        }
        rows += s.nrows() - order;
    }
    let mut x_in = DMatrix::zeros(rows, order * q);
    let mut x_out = DMatrix::zeros(rows, q);
    let mut r = 0;
    for s in segments {
        for t in order..s.nrows() {
            for k in 0..order {
                x_in.view_mut((r, k * q), (1, q)).copy_from(&s.row(t - order + k));
            }
            x_out.row_mut(r).copy_from(&s.row(t));
            r += 1;
        }
    }
    Ok(TransitionSet { x_in, x_out })
}

/// Maps gradients on transition inputs/outputs back onto segment rows.
pub(crate) fn scatter_transition_grads(
    d_in: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
    segment_lengths: &[usize],
    order: usize,
    q: usize,
) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(segment_lengths.len());
    let mut r = 0;
    for &len in segment_lengths {
        let mut g = DMatrix::zeros(len, q);
        for t in order..len {
            for k in 0..order {
                let mut row = g.row_mut(t - order + k);
                row += d_in.view((r, k * q), (1, q));
            }
            let mut row = g.row_mut(t);
            row += d_out.row(r);
            r += 1;
        }
        out.push(g);
    }
    out
}

pub(crate) struct DynEval {
    pub value: f64,
    pub d_in: DMatrix<f64>,
    pub d_out: DMatrix<f64>,
    pub d_params: Vec<f64>,
    pub d_inducing: Option<DMatrix<f64>>,
}

fn log_2pi() -> f64 {
    ln(2.0 * PI)
}

fn white_slots(kernel: &KernelSpec) -> Vec<usize> {
    let mut idx = 0;
    let mut slots = Vec::new();
    for t in &kernel.terms {
        if let KernelTerm::White { .. } = t {
            slots.push(idx);
        }
        idx += if let KernelTerm::Rbf { .. } = t { 2 } else { 1 };
    }
    slots
}

/// Exact GP marginal likelihood of `x_out` given `x_in`, one independent
/// output per latent column.
pub(crate) fn full_eval(x_in: &DMatrix<f64>, x_out: &DMatrix<f64>, kernel: &KernelSpec, with_grad: bool) -> Result<DynEval> {
    let (n, q) = x_out.shape();
    if x_in.nrows() != n {
        return Err(shape_err!("{} transition inputs for {} outputs", x_in.nrows(), n));
    }
    let k = kernel.gram(x_in);
    let f = PsdFactor::new(&k)?;
    let alpha = f.solve(x_out)?;
    let fit: f64 = alpha.iter().zip(x_out.iter()).map(|(a, y)| a * y).sum();
    let value = -0.5 * q as f64 * f.log_det() - 0.5 * fit - 0.5 * (n * q) as f64 * log_2pi();
    if !with_grad {
        return Ok(DynEval {
            value,
            d_in: DMatrix::zeros(0, 0),
            d_out: DMatrix::zeros(0, 0),
            d_params: Vec::new(),
            d_inducing: None,
        });
    }
    let mut w = f.inverse() * (-0.5 * q as f64);
    w.gemm(0.5, &alpha, &alpha.transpose(), 1.0);
    let (d_in, d_params) = kernel.gram_grads(x_in, &w);
    Ok(DynEval {
        value,
        d_in,
        d_out: -alpha,
        d_params,
        d_inducing: None,
    })
}

/// Pieces of the FITC covariance `C = A·Kmm⁻¹·Aᵀ + Λ` shared by the
/// likelihood, its gradient and prediction.
struct FitcParts {
    kmm: PsdFactor,
    /// `A = K(X_in, Z)`, n × M.
    a: DMatrix<f64>,
    /// `Λ = diag(k_nn − q_nn) + noise`.
    lambda: DVector<f64>,
    /// `V = Lm⁻¹·Aᵀ`, M × n.
    v: DMatrix<f64>,
    /// Cholesky of `B = I + V·Λ⁻¹·Vᵀ`.
    b: PsdFactor,
}

impl FitcParts {
    fn new(x_in: &DMatrix<f64>, inducing: &DMatrix<f64>, kernel: &KernelSpec) -> Result<Self> {
        if inducing.ncols() != x_in.ncols() {
            return Err(shape_err!("inducing points have {} columns, inputs {}", inducing.ncols(), x_in.ncols()));
        }
        let kmm = PsdFactor::new(&symmetric(kernel.cross(inducing, inducing)))?;
        let a = kernel.cross(x_in, inducing);
        let v = kmm.solve_lower(&a.transpose());
        let knn = kernel.diag(x_in);
        let noise = kernel.noise();
        let n = x_in.nrows();
        let mut lambda = DVector::zeros(n);
        for i in 0..n {
            let qii = v.column(i).norm_squared();
            lambda[i] = (knn[i] - qii).max(0.0) + noise;
            if !(lambda[i] > 0.0) {
                return Err(Error::Singular { jitter: 0.0 });
            }
        }
        let mut vl = v.clone();
        for i in 0..n {
            vl.column_mut(i).scale_mut(1.0 / sqrt(lambda[i]));
        }
        let mut bm = &vl * vl.transpose();
        for i in 0..bm.nrows() {
            bm[(i, i)] += 1.0;
        }
        let b = PsdFactor::new(&bm)?;
        Ok(FitcParts { kmm, a, lambda, v, b })
    }

    fn log_det(&self) -> f64 {
        self.lambda.iter().map(|l| ln(*l)).sum::<f64>() + self.b.log_det()
    }

    /// `C⁻¹·R` via the Woodbury identity.
    fn solve(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut lr = r.clone();
        for i in 0..r.nrows() {
            lr.row_mut(i).scale_mut(1.0 / self.lambda[i]);
        }
        let inner = self.b.solve(&(&self.v * &lr))?;
        let mut corr = self.v.transpose() * inner;
        for i in 0..r.nrows() {
            corr.row_mut(i).scale_mut(1.0 / self.lambda[i]);
        }
        Ok(lr - corr)
    }

    /// Diagonal of `C⁻¹`.
    fn inv_diag(&self) -> DVector<f64> {
        let lb_inv_v = self.b.solve_lower(&self.v);
        DVector::from_fn(self.lambda.len(), |i, _| {
            let l = self.lambda[i];
            1.0 / l - lb_inv_v.column(i).norm_squared() / (l * l)
        })
    }
}

fn symmetric(mut k: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..k.nrows() {
        for j in 0..i {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// FITC marginal likelihood, evaluated in O(n·M²).
pub(crate) fn fitc_eval(
    x_in: &DMatrix<f64>,
    x_out: &DMatrix<f64>,
    inducing: &DMatrix<f64>,
    kernel: &KernelSpec,
    with_grad: bool,
) -> Result<DynEval> {
    let (n, q) = x_out.shape();
    if x_in.nrows() != n {
        return Err(shape_err!("{} transition inputs for {} outputs", x_in.nrows(), n));
    }
    let p = FitcParts::new(x_in, inducing, kernel)?;
    let alpha = p.solve(x_out)?;
    let fit: f64 = alpha.iter().zip(x_out.iter()).map(|(a, y)| a * y).sum();
    let value = -0.5 * q as f64 * p.log_det() - 0.5 * fit - 0.5 * (n * q) as f64 * log_2pi();
    if !with_grad {
        return Ok(DynEval {
            value,
            d_in: DMatrix::zeros(0, 0),
            d_out: DMatrix::zeros(0, 0),
            d_params: Vec::new(),
            d_inducing: None,
        });
    }
    let qf = q as f64;
    // G = dL/dC = ½(α·αᵀ − Q·C⁻¹), never formed explicitly.
    let cinv_diag = p.inv_diag();
    let g_diag = DVector::from_fn(n, |i, _| 0.5 * (alpha.row(i).norm_squared() - qf * cinv_diag[i]));
    let cinv_a = p.solve(&p.a)?;
    let mut ga = (&alpha * (alpha.transpose() * &p.a)) * 0.5;
    ga -= cinv_a * (0.5 * qf);
    // Ḡ = G with its diagonal removed; only Q_nn's off-diagonal survives in C.
    let mut gbar_a = ga;
    for i in 0..n {
        let gi = g_diag[i];
        let mut row = gbar_a.row_mut(i);
        row -= p.a.row(i) * gi;
    }
    // dL/dA = 2·Ḡ·A·Kmm⁻¹, dL/dKmm = −Kmm⁻¹·Aᵀ·Ḡ·A·Kmm⁻¹
    let ga_kinv = p.kmm.solve(&gbar_a.transpose())?.transpose();
    let d_a = &ga_kinv * 2.0;
    let d_kmm = -symmetric(p.kmm.solve(&(p.a.transpose() * &ga_kinv))?);

    let ga_grads = kernel.cross_grads(x_in, inducing, &d_a);
    let gm_grads = kernel.cross_grads(inducing, inducing, &d_kmm);
    let (d_in_diag, d_par_diag) = kernel.diag_grads(x_in, &g_diag);
    let mut d_params: Vec<f64> = ga_grads
        .d_params
        .iter()
        .zip(&gm_grads.d_params)
        .zip(&d_par_diag)
        .map(|((a, b), c)| a + b + c)
        .collect();
    let trace_g = g_diag.sum();
    for s in white_slots(kernel) {
        d_params[s] = trace_g;
    }
    Ok(DynEval {
        value,
        d_in: ga_grads.d_a + d_in_diag,
        d_out: -alpha,
        d_params,
        d_inducing: Some(ga_grads.d_b + gm_grads.d_a + gm_grads.d_b),
    })
}

pub(crate) fn dyn_eval(
    x_in: &DMatrix<f64>,
    x_out: &DMatrix<f64>,
    kernel: &KernelSpec,
    inducing: Option<&DMatrix<f64>>,
    with_grad: bool,
) -> Result<DynEval> {
    match inducing {
        Some(z) => fitc_eval(x_in, x_out, z, kernel, with_grad),
        None => full_eval(x_in, x_out, kernel, with_grad),
    }
}

/// Analytic gradients of the (full or FITC) dynamics marginal likelihood.
#[derive(Debug, Clone)]
pub struct DynamicsGradients {
    pub value: f64,
    pub d_in: DMatrix<f64>,
    pub d_out: DMatrix<f64>,
    /// Natural-scale, in [`KernelSpec::params`] order.
    pub d_params: Vec<f64>,
    pub d_inducing: Option<DMatrix<f64>>,
}

pub fn dynamics_gradients(
    x_in: &DMatrix<f64>,
    x_out: &DMatrix<f64>,
    kernel: &KernelSpec,
    inducing: Option<&DMatrix<f64>>,
) -> Result<DynamicsGradients> {
    let e = dyn_eval(x_in, x_out, kernel, inducing, true)?;
    Ok(DynamicsGradients {
        value: e.value,
        d_in: e.d_in,
        d_out: e.d_out,
        d_params: e.d_params,
        d_inducing: e.d_inducing,
    })
}

/// Inducing inputs of a FITC-approximated expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitcState {
    #[serde(with = "crate::serde_mat")]
    pub inducing: DMatrix<f64>,
}

impl FitcState {
    pub fn m(&self) -> usize {
        self.inducing.nrows()
    }
}

/// Rows `⌊i·n/M⌋` for `i = 0..M`.
pub fn stride_subsample(x: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m < 1 {
        return Err(Error::InvalidArgument("FITC needs at least one inducing point".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(alloc::format!("{m} inducing points for {n} transitions")));
    }
    let mut z = DMatrix::zeros(m, x.ncols());
    for i in 0..m {
        z.row_mut(i).copy_from(&x.row(i * n / m));
    }
    Ok(z)
}

enum Predictor {
    Full { factor: PsdFactor, alpha: DMatrix<f64> },
    Fitc {
        kmm: PsdFactor,
        /// Cholesky of `Kmm + Aᵀ·Λ⁻¹·A`.
        sigma: PsdFactor,
        /// `Σ·Aᵀ·Λ⁻¹·X_out`.
        beta: DMatrix<f64>,
    },
}

impl core::fmt::Debug for Predictor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Predictor::Full { .. } => f.write_str("Full"),
            Predictor::Fitc { .. } => f.write_str("Fitc"),
        }
    }
}

impl Clone for Predictor {
    fn clone(&self) -> Self {
        match self {
            Predictor::Full { factor, alpha } => Predictor::Full {
                factor: factor.clone(),
                alpha: alpha.clone(),
            },
            Predictor::Fitc { kmm, sigma, beta } => Predictor::Fitc {
                kmm: kmm.clone(),
                sigma: sigma.clone(),
                beta: beta.clone(),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DynamicsParts {
    class_id: usize,
    order: usize,
    #[serde(with = "crate::serde_mat")]
    x_in: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    x_out: DMatrix<f64>,
    kernel: KernelSpec,
    sparse: Option<FitcState>,
}

/// One trained dynamical expert. `class_id` is the zero-based class index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "DynamicsParts", try_from = "DynamicsParts")]
pub struct DynamicsModel {
    pub class_id: usize,
    pub order: usize,
    pub x_in: DMatrix<f64>,
    pub x_out: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub gram: GramMatrix,
    pub sparse: Option<FitcState>,
    predictor: Predictor,
}

impl From<DynamicsModel> for DynamicsParts {
    fn from(m: DynamicsModel) -> Self {
        DynamicsParts {
            class_id: m.class_id,
            order: m.order,
            x_in: m.x_in,
            x_out: m.x_out,
            kernel: m.kernel,
            sparse: m.sparse,
        }
    }
}

impl TryFrom<DynamicsParts> for DynamicsModel {
    type Error = Error;
    fn try_from(p: DynamicsParts) -> Result<Self> {
        DynamicsModel::new(p.class_id, p.order, p.x_in, p.x_out, p.kernel, p.sparse)
    }
}

impl PartialEq for DynamicsModel {
    fn eq(&self, o: &Self) -> bool {
        self.class_id == o.class_id
            && self.order == o.order
            && self.x_in == o.x_in
            && self.x_out == o.x_out
            && self.kernel == o.kernel
            && self.sparse == o.sparse
    }
}

impl DynamicsModel {
    pub fn new(
        class_id: usize,
        order: usize,
        x_in: DMatrix<f64>,
        x_out: DMatrix<f64>,
        kernel: KernelSpec,
        sparse: Option<FitcState>,
    ) -> Result<Self> {
        kernel.validate()?;
        let q = x_out.ncols();
        if x_in.nrows() != x_out.nrows() || x_in.ncols() != order * q {
            return Err(shape_err!(
                "transition inputs {}x{} inconsistent with outputs {}x{} at order {order}",
                x_in.nrows(),
                x_in.ncols(),
                x_out.nrows(),
                q
            ));
        }
        if x_in.nrows() == 0 {
            return Err(Error::TooShort("expert has no transitions".into()));
        }
        let k = kernel.gram(&x_in);
        let (gram, predictor) = match &sparse {
            None => {
                let factor = PsdFactor::new(&k)?;
                let alpha = factor.solve(&x_out)?;
                (factor.to_gram(k), Predictor::Full { factor, alpha })
            }
            Some(state) => {
                if state.m() < 1 || state.m() > x_in.nrows() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "{} inducing points for {} transitions",
                        state.m(),
                        x_in.nrows()
                    )));
                }
                let p = FitcParts::new(&x_in, &state.inducing, &kernel)?;
                let mut al = p.a.clone();
                let mut ly = x_out.clone();
                for i in 0..al.nrows() {
                    al.row_mut(i).scale_mut(1.0 / p.lambda[i]);
                    ly.row_mut(i).scale_mut(1.0 / p.lambda[i]);
                }
                let kmm_dense = symmetric(kernel.cross(&state.inducing, &state.inducing));
                let s = symmetric(kmm_dense + p.a.transpose() * &al);
                let sigma = PsdFactor::new(&s)?;
                let beta = sigma.solve(&(p.a.transpose() * ly))?;
                (
                    GramMatrix::new(k),
                    Predictor::Fitc {
                        kmm: p.kmm,
                        sigma,
                        beta,
                    },
                )
            }
        };
        Ok(DynamicsModel {
            class_id,
            order,
            x_in,
            x_out,
            kernel,
            gram,
            sparse,
            predictor,
        })
    }

    /// Expert trained on the latent segments of one class, with the kernel
    /// held fixed.
    pub fn from_segments(class_id: usize, order: usize, segments: &[DMatrix<f64>], kernel: KernelSpec, sparse: Option<FitcState>) -> Result<Self> {
        let t = transitions(segments, order)?;
        DynamicsModel::new(class_id, order, t.x_in, t.x_out, kernel, sparse)
    }

    pub fn latent_dims(&self) -> usize {
        self.x_out.ncols()
    }

    pub fn n_transitions(&self) -> usize {
        self.x_in.nrows()
    }

    pub fn log_likelihood(&self) -> Result<f64> {
        dynamics_log_likelihood(self, &self.x_in, &self.x_out)
    }

    /// Predictive mean and covariance (including observation noise) of
    /// outputs at `x_star_in`.
    pub fn predict(&self, x_star_in: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if x_star_in.ncols() != self.x_in.ncols() {
            return Err(shape_err!("query has {} columns, expert inputs {}", x_star_in.ncols(), self.x_in.ncols()));
        }
        let noise = self.kernel.noise();
        let kss = symmetric(self.kernel.cross(x_star_in, x_star_in));
        let t = x_star_in.nrows();
        let (mean, mut cov) = match &self.predictor {
            Predictor::Full { factor, alpha } => {
                let ks = self.kernel.cross(&self.x_in, x_star_in);
                let mean = ks.transpose() * alpha;
                let v = factor.solve(&ks)?;
                (mean, kss - ks.transpose() * v)
            }
            Predictor::Fitc { kmm, sigma, beta } => {
                let z = &self.sparse.as_ref().expect("fitc predictor").inducing;
                let ksm = self.kernel.cross(x_star_in, z);
                let mean = &ksm * beta;
                let lsm = kmm.solve_lower(&ksm.transpose());
                let mut cov = ksm.clone() * sigma.solve(&ksm.transpose())?;
                for i in 0..t {
                    cov[(i, i)] += (kss[(i, i)] - lsm.column(i).norm_squared()).max(0.0);
                }
                (mean, cov)
            }
        };
        for i in 0..t {
            cov[(i, i)] += noise;
        }
        Ok((mean, symmetric(cov)))
    }

    pub fn predict_mean(&self, x_star_in: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_star_in.ncols() != self.x_in.ncols() {
            return Err(shape_err!("query has {} columns, expert inputs {}", x_star_in.ncols(), self.x_in.ncols()));
        }
        Ok(match &self.predictor {
            Predictor::Full { alpha, .. } => self.kernel.cross(x_star_in, &self.x_in) * alpha,
            Predictor::Fitc { beta, .. } => {
                let z = &self.sparse.as_ref().expect("fitc predictor").inducing;
                self.kernel.cross(x_star_in, z) * beta
            }
        })
    }
}

/// Marginal log-likelihood of `x_out` given `x_in` under the expert's kernel
/// (FITC when the expert is sparse).
pub fn dynamics_log_likelihood(model: &DynamicsModel, x_in: &DMatrix<f64>, x_out: &DMatrix<f64>) -> Result<f64> {
    if x_in.ncols() != model.x_in.ncols() || x_out.ncols() != model.latent_dims() {
        return Err(shape_err!("transition shapes do not match the expert"));
    }
    Ok(dyn_eval(x_in, x_out, &model.kernel, model.sparse.as_ref().map(|s| &s.inducing), false)?.value)
}

/// Log-density of the prefix transitions of `x_star` conditioned on the
/// expert's training transitions:
/// `−(Q/2)·log|K_*| − ½·tr(K_*⁻¹·Z·Zᵀ) − (T·Q/2)·log 2π`, where `Z` is the
/// prefix outputs minus their conditional mean and `K_*` the conditional
/// covariance including noise.
pub fn sequence_score(model: &DynamicsModel, x_star: &DMatrix<f64>) -> Result<f64> {
    let order = model.order;
    if x_star.nrows() <= order {
        return Err(Error::TooShort(alloc::format!(
            "prefix of {} latent rows cannot be scored at Markov order {order}",
            x_star.nrows()
        )));
    }
    if x_star.ncols() != model.latent_dims() {
        return Err(shape_err!("prefix has {} latent columns, expert {}", x_star.ncols(), model.latent_dims()));
    }
    let t = transitions(core::slice::from_ref(x_star), order)?;
    let (mean, cov) = model.predict(&t.x_in)?;
    let z = &t.x_out - mean;
    let f = PsdFactor::new(&cov)?;
    let sol = f.solve(&z)?;
    let fit: f64 = sol.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
    let (rows, q) = z.shape();
    Ok(-0.5 * q as f64 * f.log_det() - 0.5 * fit - 0.5 * (rows * q) as f64 * log_2pi())
}

/// Iterated predictive-mean rollout from the last `order` seed rows.
pub fn rollout(model: &DynamicsModel, x_seed: &DMatrix<f64>, steps: usize) -> Result<DMatrix<f64>> {
    let (order, q) = (model.order, model.latent_dims());
    if x_seed.nrows() < order || x_seed.ncols() != q {
        return Err(shape_err!("rollout seed is {}x{}, need at least {order}x{q}", x_seed.nrows(), x_seed.ncols()));
    }
    let mut out = DMatrix::zeros(steps, q);
    let mut state = DMatrix::zeros(1, order * q);
    let start = x_seed.nrows() - order;
    for k in 0..order {
        state.view_mut((0, k * q), (1, q)).copy_from(&x_seed.row(start + k));
    }
    for s in 0..steps {
        let next = model.predict_mean(&state)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("rollout step {s}")));
        }
        out.row_mut(s).copy_from(&next.row(0));
        if order > 1 {
            let shifted = state.view((0, q), (1, (order - 1) * q)).into_owned();
            state.view_mut((0, 0), (1, (order - 1) * q)).copy_from(&shifted);
        }
        state.view_mut((0, (order - 1) * q), (1, q)).copy_from(&next.row(0));
    }
    Ok(out)
}

/// Optimizes an expert's kernel hyperparameters (and inducing inputs, when
/// sparse and `optimize_inducing` is set) with its transitions held fixed.
pub fn optimize_hyperparameters(
    model: &DynamicsModel,
    bounds: &HyperBounds,
    optimize_inducing: bool,
    opts: &OptimOptions,
) -> Result<DynamicsModel> {
    let np = model.kernel.n_params();
    let z0 = model.sparse.as_ref().map(|s| s.inducing.clone());
    let zlen = if optimize_inducing { z0.as_ref().map_or(0, |z| z.len()) } else { 0 };
    let mut start = DVector::zeros(np + zlen);
    start.rows_mut(0, np).copy_from_slice(&bounds.encode(&model.kernel));
    if zlen > 0 {
        start.rows_mut(np, zlen).copy_from_slice(z0.as_ref().unwrap().as_slice());
    }
    let mut work = model.kernel.clone();
    let zshape = z0.as_ref().map(|z| z.shape());
    let out = maximize(
        |p| {
            let jac = bounds.decode(&mut work, &p.as_slice()[..np]);
            let z = match (&z0, zlen > 0) {
                (Some(_), true) => {
                    let (r, c) = zshape.unwrap();
                    Some(DMatrix::from_column_slice(r, c, &p.as_slice()[np..]))
                }
                (Some(z), false) => Some(z.clone()),
                _ => None,
            };
            let e = dyn_eval(&model.x_in, &model.x_out, &work, z.as_ref(), true)?;
            let mut g = DVector::zeros(np + zlen);
            for i in 0..np {
                g[i] = e.d_params[i] * jac[i];
            }
            if zlen > 0 {
                g.rows_mut(np, zlen).copy_from_slice(e.d_inducing.as_ref().unwrap().as_slice());
            }
            Ok((e.value, g))
        },
        start,
        opts,
    )?;
    let mut kernel = model.kernel.clone();
    bounds.decode(&mut kernel, &out.x.as_slice()[..np]);
    let sparse = match (&z0, zlen > 0) {
        (Some(_), true) => {
            let (r, c) = zshape.unwrap();
            Some(FitcState {
                inducing: DMatrix::from_column_slice(r, c, &out.x.as_slice()[np..]),
            })
        }
        (Some(z), false) => Some(FitcState { inducing: z.clone() }),
        _ => None,
    };
    DynamicsModel::new(model.class_id, model.order, model.x_in.clone(), model.x_out.clone(), kernel, sparse)
}

/// Converts an expert to FITC with `m` inducing points taken as a uniform
/// stride subsample of its inputs, then optimizes inducing points and
/// hyperparameters under the FITC likelihood.
pub fn fitc_fit(model: &DynamicsModel, m: usize, bounds: &HyperBounds, opts: &OptimOptions) -> Result<DynamicsModel> {
    let sparse = fitc_init(model, m)?;
    optimize_hyperparameters(&sparse, bounds, true, opts)
}

/// FITC conversion without any optimization.
pub fn fitc_init(model: &DynamicsModel, m: usize) -> Result<DynamicsModel> {
    let z = stride_subsample(&model.x_in, m)?;
    DynamicsModel::new(
        model.class_id,
        model.order,
        model.x_in.clone(),
        model.x_out.clone(),
        model.kernel.clone(),
        Some(FitcState { inducing: z }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn circle(n: usize, q: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, q, |i, j| {
            let t = i as f64 * 0.35;
            if j % 2 == 0 { t.cos() } else { t.sin() * (1.0 + 0.1 * j as f64) }
        })
    }

    #[test]
    fn transitions_order_two_layout() {
        let s = DMatrix::from_fn(4, 2, |i, j| (10 * i + j) as f64);
        let t = transitions(&[s], 2).unwrap();
        assert_eq!(t.x_in.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 10.0, 11.0]);
        assert_eq!(t.x_out.row(1).iter().copied().collect::<Vec<_>>(), vec![30.0, 31.0]);
    }

    #[test]
    fn transitions_stay_inside_segments() {
        let a = DMatrix::from_element(3, 1, 1.0);
        let b = DMatrix::from_element(4, 1, 2.0);
        let t = transitions(&[a, b], 1).unwrap();
        assert_eq!(t.x_in.nrows(), 5);
        assert_eq!(t.x_in[(2, 0)], 2.0);
    }

    #[test]
    fn scalar_transition_closed_form() {
        let kernel = KernelSpec::rbf(0.8, 1.0).plus(KernelTerm::White { variance: 0.2 });
        let x_in = DMatrix::from_element(1, 2, 0.4);
        let x_out = DMatrix::from_row_slice(1, 2, &[0.3, -0.5]);
        let m = DynamicsModel::new(0, 1, x_in.clone(), x_out.clone(), kernel, None).unwrap();
        let s2 = 1.0f64;
        let expected: f64 = [0.3f64, -0.5].iter().map(|y| -0.5 * (2.0 * PI * s2).ln() - 0.5 * y * y / s2).sum();
        assert!((m.log_likelihood().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn one_step_rollout_interpolates() {
        let seg = circle(20, 2);
        let kernel = KernelSpec::rbf_plus_linear(1.0, 0.7, 0.1).plus(KernelTerm::White { variance: 1e-9 });
        let m = DynamicsModel::from_segments(0, 1, &[seg.clone()], kernel, None).unwrap();
        let r = rollout(&m, &seg.rows(5, 1).into_owned(), 1).unwrap();
        assert!((r.row(0) - seg.row(6)).norm() < 1e-4);
        assert_eq!(rollout(&m, &seg.rows(5, 1).into_owned(), 0).unwrap().nrows(), 0);
        let r2 = rollout(&m, &seg.rows(5, 1).into_owned(), 30).unwrap();
        assert_eq!(r2, rollout(&m, &seg.rows(5, 1).into_owned(), 30).unwrap());
    }

    #[test]
    fn saturated_fitc_matches_full_mean() {
        let seg = circle(25, 3);
        let kernel = KernelSpec::dynamics_default();
        let full = DynamicsModel::from_segments(0, 1, &[seg], kernel, None).unwrap();
        let n = full.n_transitions();
        let sparse = fitc_init(&full, n).unwrap();
        let a = full.predict_mean(&full.x_in).unwrap();
        let b = sparse.predict_mean(&full.x_in).unwrap();
        assert!((a - b).abs().max() < 1e-6);
        let ll_full = full.log_likelihood().unwrap();
        let ll_sparse = sparse.log_likelihood().unwrap();
        assert!((ll_full - ll_sparse).abs() < 1e-5 * ll_full.abs());
    }

    #[test]
    fn single_inducing_point_is_finite() {
        let seg = circle(15, 2);
        let full = DynamicsModel::from_segments(0, 1, &[seg.clone()], KernelSpec::dynamics_default(), None).unwrap();
        let sparse = fitc_init(&full, 1).unwrap();
        let r = rollout(&sparse, &seg.rows(0, 1).into_owned(), 50).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert!(fitc_init(&full, 0).is_err());
    }

    #[test]
    fn prefix_too_short() {
        let seg = circle(10, 2);
        let m = DynamicsModel::from_segments(0, 2, &[seg.clone()], KernelSpec::dynamics_default(), None).unwrap();
        assert!(matches!(sequence_score(&m, &seg.rows(0, 2).into_owned()), Err(Error::TooShort(_))));
        assert!(sequence_score(&m, &seg.rows(0, 3).into_owned()).is_ok());
    }
}
