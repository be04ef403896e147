//! The shared emission GP mapping latent coordinates to observations.

use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::log as ln;

use crate::error::{shape_err, Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{GramMatrix, PsdFactor};
use crate::optim::{maximize, OptimOptions};
use crate::params::HyperBounds;

fn center(y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = y.row_mean().transpose();
    let mut c = y.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (mean, c)
}

/// Log marginal likelihood and its gradients for already centered `y`.
pub(crate) struct EmissionEval {
    pub value: f64,
    pub d_x: DMatrix<f64>,
    pub d_params: Vec<f64>,
}

pub(crate) fn emission_eval(
    x: &DMatrix<f64>,
    y_centered: &DMatrix<f64>,
    kernel: &KernelSpec,
    with_grad: bool,
) -> Result<EmissionEval> {
    let (n, d) = y_centered.shape();
    if x.nrows() != n {
        return Err(shape_err!("latent has {} rows, observations {}", x.nrows(), n));
    }
    let k = kernel.gram(x);
    let f = PsdFactor::new(&k)?;
    let alpha = f.solve(y_centered)?;
    let data_fit: f64 = alpha.iter().zip(y_centered.iter()).map(|(a, y)| a * y).sum();
    let value = -0.5 * d as f64 * f.log_det() - 0.5 * data_fit - 0.5 * (n * d) as f64 * ln(2.0 * PI);
    if !with_grad {
        return Ok(EmissionEval {
            value,
            d_x: DMatrix::zeros(0, 0),
            d_params: Vec::new(),
        });
    }
    // dL/dK = ½(α·αᵀ − D·K⁻¹)
    let mut w = f.inverse() * (-0.5 * d as f64);
    w.gemm(0.5, &alpha, &alpha.transpose(), 1.0);
    let (d_x, d_params) = kernel.gram_grads(x, &w);
    Ok(EmissionEval { value, d_x, d_params })
}

/// `−(D/2)·log|K| − ½·tr(K⁻¹·Y·Yᵀ) − (N·D/2)·log 2π` on mean-centered `Y`.
pub fn emission_log_likelihood(x: &DMatrix<f64>, y: &DMatrix<f64>, kernel: &KernelSpec) -> Result<f64> {
    let (_, yc) = center(y);
    Ok(emission_eval(x, &yc, kernel, false)?.value)
}

/// Analytic gradients of [`emission_log_likelihood`].
#[derive(Debug, Clone)]
pub struct EmissionGradients {
    pub d_x: DMatrix<f64>,
    /// Natural-scale, in [`KernelSpec::params`] order.
    pub d_params: Vec<f64>,
}

pub fn emission_gradients(x: &DMatrix<f64>, y: &DMatrix<f64>, kernel: &KernelSpec) -> Result<EmissionGradients> {
    let (_, yc) = center(y);
    let e = emission_eval(x, &yc, kernel, true)?;
    Ok(EmissionGradients {
        d_x: e.d_x,
        d_params: e.d_params,
    })
}

/// How [`EmissionModel::infer_latent`] seeds the search.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentSeed {
    /// Each row starts at the training latent whose observation is closest.
    NearestNeighbor,
    Provided(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredLatent {
    pub x: DMatrix<f64>,
    pub objective_init: f64,
    pub objective: f64,
    pub converged: bool,
}

/// Serialized form of [`EmissionModel`]; caches are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct EmissionParts {
    #[serde(with = "crate::serde_mat")]
    x: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    y_mean: DVector<f64>,
    #[serde(with = "crate::serde_mat")]
    y_centered: DMatrix<f64>,
    kernel: KernelSpec,
}

/// A fitted emission GP.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "EmissionParts", try_from = "EmissionParts")]
pub struct EmissionModel {
    pub x: DMatrix<f64>,
    pub y_mean: DVector<f64>,
    pub y_centered: DMatrix<f64>,
    pub kernel: KernelSpec,
    /// `K⁻¹·Y_centered`.
    pub alpha_cache: DMatrix<f64>,
    pub gram: GramMatrix,
    factor: PsdFactor,
}

impl From<EmissionModel> for EmissionParts {
    fn from(m: EmissionModel) -> Self {
        EmissionParts {
            x: m.x,
            y_mean: m.y_mean,
            y_centered: m.y_centered,
            kernel: m.kernel,
        }
    }
}

impl TryFrom<EmissionParts> for EmissionModel {
    type Error = Error;
    fn try_from(p: EmissionParts) -> Result<Self> {
        EmissionModel::from_centered(p.x, p.y_mean, p.y_centered, p.kernel)
    }
}

impl PartialEq for EmissionModel {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x && self.y_mean == other.y_mean && self.y_centered == other.y_centered && self.kernel == other.kernel
    }
}

impl EmissionModel {
    /// Conditions the GP on `(x, y)` without optimizing anything.
    pub fn new(x: DMatrix<f64>, y: &DMatrix<f64>, kernel: KernelSpec) -> Result<Self> {
        let (mean, yc) = center(y);
        EmissionModel::from_centered(x, mean, yc, kernel)
    }

    pub fn from_centered(x: DMatrix<f64>, y_mean: DVector<f64>, y_centered: DMatrix<f64>, kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        if x.nrows() != y_centered.nrows() {
            return Err(shape_err!("latent has {} rows, observations {}", x.nrows(), y_centered.nrows()));
        }
        if y_mean.len() != y_centered.ncols() {
            return Err(shape_err!("mean has {} entries for {} features", y_mean.len(), y_centered.ncols()));
        }
        let k = kernel.gram(&x);
        let factor = PsdFactor::new(&k)?;
        let alpha_cache = factor.solve(&y_centered)?;
        let gram = factor.to_gram(k);
        Ok(EmissionModel {
            x,
            y_mean,
            y_centered,
            kernel,
            alpha_cache,
            gram,
            factor,
        })
    }

    /// Jointly optimizes latent coordinates and kernel hyperparameters of a
    /// standalone GPLVM.
    pub fn optimize(x0: DMatrix<f64>, y: &DMatrix<f64>, kernel: KernelSpec, bounds: &HyperBounds, opts: &OptimOptions) -> Result<Self> {
        let (mean, yc) = center(y);
        let (n, q) = x0.shape();
        let np = kernel.n_params();
        let mut start = DVector::zeros(n * q + np);
        start.rows_mut(0, n * q).copy_from_slice(x0.as_slice());
        start.rows_mut(n * q, np).copy_from_slice(&bounds.encode(&kernel));
        let mut work = kernel.clone();
        let out = maximize(
            |p| {
                let x = DMatrix::from_column_slice(n, q, &p.as_slice()[..n * q]);
                let jac = bounds.decode(&mut work, &p.as_slice()[n * q..]);
                let e = emission_eval(&x, &yc, &work, true)?;
                let mut g = DVector::zeros(n * q + np);
                g.rows_mut(0, n * q).copy_from_slice(e.d_x.as_slice());
                for i in 0..np {
                    g[n * q + i] = e.d_params[i] * jac[i];
                }
                Ok((e.value, g))
            },
            start,
            opts,
        )?;
        let x = DMatrix::from_column_slice(n, q, &out.x.as_slice()[..n * q]);
        let mut kernel = kernel;
        bounds.decode(&mut kernel, &out.x.as_slice()[n * q..]);
        EmissionModel::from_centered(x, mean, yc, kernel)
    }

    pub fn n_points(&self) -> usize {
        self.x.nrows()
    }

    pub fn latent_dims(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dims(&self) -> usize {
        self.y_centered.ncols()
    }

    pub fn noise(&self) -> f64 {
        self.kernel.noise()
    }

    pub fn log_likelihood(&self) -> f64 {
        let (n, d) = self.y_centered.shape();
        let fit: f64 = self.alpha_cache.iter().zip(self.y_centered.iter()).map(|(a, y)| a * y).sum();
        -0.5 * d as f64 * self.factor.log_det() - 0.5 * fit - 0.5 * (n * d) as f64 * ln(2.0 * PI)
    }

    /// Predictive mean (with the feature mean restored) and noise-free
    /// predictive variance, clamped at zero.
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (mean, var, _) = self.predict_raw(x_star)?;
        Ok((mean, var.map(|v| v.max(0.0))))
    }

    /// Mean, unclamped variance and `K⁻¹·K(X, X*)`.
    fn predict_raw(&self, x_star: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        if x_star.ncols() != self.latent_dims() {
            return Err(shape_err!("query has {} latent columns, model {}", x_star.ncols(), self.latent_dims()));
        }
        let ks = self.kernel.cross(x_star, &self.x);
        let mut mean = &ks * &self.alpha_cache;
        for mut row in mean.row_iter_mut() {
            row += self.y_mean.transpose();
        }
        let v = self.factor.solve(&ks.transpose())?;
        let mut var = self.kernel.diag(x_star);
        for t in 0..x_star.nrows() {
            var[t] -= ks.row(t).transpose().dot(&v.column(t));
        }
        Ok((mean, var, v))
    }

    /// Sum over rows of `log N(y*_t; μ(x_t), (σ²(x_t) + noise)·I)` and its
    /// gradient with respect to the latent rows.
    pub fn projection_objective(&self, x_star: &DMatrix<f64>, y_star: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let (mean, var, kinv_ks) = self.predict_raw(x_star)?;
        let d = self.output_dims() as f64;
        let noise = self.noise();
        let t_rows = x_star.nrows();
        let mut value = 0.0;
        let mut r = DMatrix::zeros(t_rows, self.output_dims());
        let mut h = DVector::zeros(t_rows);
        for t in 0..t_rows {
            let s2 = var[t].max(0.0) + noise;
            if !(s2 > 0.0) {
                return Err(Error::NonFinite("projection variance is zero".into()));
            }
            let resid = y_star.row(t) - mean.row(t);
            let sq = resid.norm_squared();
            value += -0.5 * d * ln(2.0 * PI * s2) - 0.5 * sq / s2;
            r.row_mut(t).copy_from(&(resid / s2));
            // clamped variance has zero gradient
            h[t] = if var[t] > 0.0 { -0.5 * d / s2 + 0.5 * sq / (s2 * s2) } else { 0.0 };
        }
        // dℓ/dK*_ti = (R·αᵀ)_ti − 2·h_t·(K⁻¹·K*ᵀ)_it
        let mut w = &r * self.alpha_cache.transpose();
        for t in 0..t_rows {
            let ht = h[t];
            for i in 0..self.n_points() {
                w[(t, i)] -= 2.0 * ht * kinv_ks[(i, t)];
            }
        }
        let g = self.kernel.cross_grads(x_star, &self.x, &w);
        let (d_diag, _) = self.kernel.diag_grads(x_star, &h);
        Ok((value, g.d_a + d_diag))
    }

    /// Index of the training observation closest to `y` (first on ties).
    pub fn nearest_training_point(&self, y: &DVector<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.n_points() {
            let mut d2 = 0.0;
            for c in 0..self.output_dims() {
                let diff = self.y_centered[(i, c)] + self.y_mean[c] - y[c];
                d2 += diff * diff;
            }
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best.0
    }

    /// Latent rows maximizing the emission predictive density of `y_star`
    /// with the model held fixed.
    pub fn infer_latent(&self, y_star: &DMatrix<f64>, seed: &LatentSeed, opts: &OptimOptions) -> Result<InferredLatent> {
        let (t_rows, q) = (y_star.nrows(), self.latent_dims());
        if y_star.ncols() != self.output_dims() {
            return Err(shape_err!("observations have {} columns, model {}", y_star.ncols(), self.output_dims()));
        }
        if t_rows == 0 {
            return Ok(InferredLatent {
                x: DMatrix::zeros(0, q),
                objective_init: 0.0,
                objective: 0.0,
                converged: true,
            });
        }
        let x0 = match seed {
            LatentSeed::NearestNeighbor => {
                let mut x0 = DMatrix::zeros(t_rows, q);
                for t in 0..t_rows {
                    let i = self.nearest_training_point(&y_star.row(t).transpose());
                    x0.row_mut(t).copy_from(&self.x.row(i));
                }
                x0
            }
            LatentSeed::Provided(x) => {
                if x.shape() != (t_rows, q) {
                    return Err(shape_err!("provided latent seed is {}x{}, expected {t_rows}x{q}", x.nrows(), x.ncols()));
                }
                x.clone()
            }
        };
        let out = maximize(
            |p| {
                let xs = DMatrix::from_column_slice(t_rows, q, p.as_slice());
                let (v, g) = self.projection_objective(&xs, y_star)?;
                Ok((v, DVector::from_column_slice(g.as_slice())))
            },
            DVector::from_column_slice(x0.as_slice()),
            opts,
        )?;
        Ok(InferredLatent {
            x: DMatrix::from_column_slice(t_rows, q, out.x.as_slice()),
            objective_init: out.trace[0],
            objective: out.value,
            converged: out.converged,
        })
    }
}
