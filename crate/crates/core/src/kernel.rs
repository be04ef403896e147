//! Covariance functions over latent points (rows of a matrix) and their
//! analytic derivatives.
//!
//! A [`KernelSpec`] is a sum of terms. The white-noise term only acts on the
//! diagonal of a Gram matrix built from a single point set, so
//! [`KernelSpec::cross`] never includes it.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::exp;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelTerm {
    Rbf { variance: f64, lengthscale: f64 },
    Linear { variance: f64 },
    Bias { variance: f64 },
    White { variance: f64 },
}

impl KernelTerm {
    fn n_params(&self) -> usize {
        match self {
            KernelTerm::Rbf { .. } => 2,
            _ => 1,
        }
    }
}

/// Which hyperparameter a flat parameter index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Variance,
    Lengthscale,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub terms: Vec<KernelTerm>,
}

/// Contracted derivatives `Σ_ij W_ij ∂k(a_i, b_j)/∂·`.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    /// One entry per hyperparameter, in [`KernelSpec::params`] order, natural scale.
    pub d_params: Vec<f64>,
}

/// Full (uncontracted) derivative tensors of a cross-covariance matrix.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    /// `∂K/∂θ_p` for each hyperparameter, natural scale.
    pub params: Vec<DMatrix<f64>>,
    /// `wrt_a[q][(i, j)] = ∂K_ij/∂A_iq`.
    pub wrt_a: Vec<DMatrix<f64>>,
}

fn sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let an: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let bn: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = a * b.transpose();
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let v = an[i] + bn[j] - 2.0 * d[(i, j)];
            d[(i, j)] = if v > 0.0 { v } else { 0.0 };
        }
    }
    d
}

impl KernelSpec {
    pub fn new(terms: Vec<KernelTerm>) -> Result<Self> {
        let spec = KernelSpec { terms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rbf(variance: f64, lengthscale: f64) -> Self {
        KernelSpec {
            terms: alloc::vec![KernelTerm::Rbf { variance, lengthscale }],
        }
    }

    pub fn linear(variance: f64) -> Self {
        KernelSpec {
            terms: alloc::vec![KernelTerm::Linear { variance }],
        }
    }

    pub fn bias(variance: f64) -> Self {
        KernelSpec {
            terms: alloc::vec![KernelTerm::Bias { variance }],
        }
    }

    pub fn white(variance: f64) -> Self {
        KernelSpec {
            terms: alloc::vec![KernelTerm::White { variance }],
        }
    }

    pub fn rbf_plus_linear(variance: f64, lengthscale: f64, linear_variance: f64) -> Self {
        KernelSpec::rbf(variance, lengthscale).plus(KernelTerm::Linear {
            variance: linear_variance,
        })
    }

    /// rbf + bias + white, used by the emission GP.
    pub fn emission_default() -> Self {
        KernelSpec::rbf(1.0, 1.0)
            .plus(KernelTerm::Bias { variance: 0.1 })
            .plus(KernelTerm::White { variance: 0.01 })
    }

    /// rbf + linear + white, used by the dynamical GPs.
    pub fn dynamics_default() -> Self {
        KernelSpec::rbf_plus_linear(1.0, 1.0, 0.1).plus(KernelTerm::White { variance: 0.01 })
    }

    pub fn plus(mut self, term: KernelTerm) -> Self {
        self.terms.push(term);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidArgument("kernel has no terms".into()));
        }
        for t in &self.terms {
            let ok = match *t {
                KernelTerm::Rbf { variance, lengthscale } => {
                    variance > 0.0 && lengthscale > 0.0 && variance.is_finite() && lengthscale.is_finite()
                }
                KernelTerm::Linear { variance } | KernelTerm::Bias { variance } => {
                    variance > 0.0 && variance.is_finite()
                }
                KernelTerm::White { variance } => variance >= 0.0 && variance.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidArgument(alloc::format!("invalid kernel term {t:?}")));
            }
        }
        Ok(())
    }

    /// Total white-noise variance.
    pub fn noise(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| match t {
                KernelTerm::White { variance } => *variance,
                _ => 0.0,
            })
            .sum()
    }

    pub fn n_params(&self) -> usize {
        self.terms.iter().map(KernelTerm::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for t in &self.terms {
            match *t {
                KernelTerm::Rbf { variance, lengthscale } => {
                    p.push(variance);
                    p.push(lengthscale);
                }
                KernelTerm::Linear { variance }
                | KernelTerm::Bias { variance }
                | KernelTerm::White { variance } => p.push(variance),
            }
        }
        p
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut p = Vec::with_capacity(self.n_params());
        for t in &self.terms {
            match t {
                KernelTerm::Rbf { .. } => {
                    p.push(ParamKind::Variance);
                    p.push(ParamKind::Lengthscale);
                }
                KernelTerm::White { .. } => p.push(ParamKind::Noise),
                _ => p.push(ParamKind::Variance),
            }
        }
        p
    }

    pub fn set_params(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.n_params());
        let mut it = values.iter().copied();
        for t in &mut self.terms {
            match t {
                KernelTerm::Rbf { variance, lengthscale } => {
                    *variance = it.next().unwrap();
                    *lengthscale = it.next().unwrap();
                }
                KernelTerm::Linear { variance }
                | KernelTerm::Bias { variance }
                | KernelTerm::White { variance } => *variance = it.next().unwrap(),
            }
        }
    }

    /// Noise-free cross-covariance `K(A, B)`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(a.nrows(), b.nrows());
        let mut d2: Option<DMatrix<f64>> = None;
        for t in &self.terms {
            match *t {
                KernelTerm::Rbf { variance, lengthscale } => {
                    let d = d2.get_or_insert_with(|| sq_dists(a, b));
                    let s = -0.5 / (lengthscale * lengthscale);
                    k.zip_apply(d, |kv, dv| *kv += variance * exp(s * dv));
                }
                KernelTerm::Linear { variance } => {
                    k += (a * b.transpose()) * variance;
                }
                KernelTerm::Bias { variance } => k.add_scalar_mut(variance),
                KernelTerm::White { .. } => {}
            }
        }
        k
    }

    /// `K(A, A) + noise·I`.
    pub fn gram(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = self.cross(a, a);
        // exact symmetry
        for i in 0..k.nrows() {
            for j in 0..i {
                let v = 0.5 * (k[(i, j)] + k[(j, i)]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let noise = self.noise();
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        k
    }

    /// Noise-free `k(a_i, a_i)`.
    pub fn diag(&self, a: &DMatrix<f64>) -> DVector<f64> {
        let mut d = DVector::zeros(a.nrows());
        for t in &self.terms {
            match *t {
                KernelTerm::Rbf { variance, .. } | KernelTerm::Bias { variance } => d.add_scalar_mut(variance),
                KernelTerm::Linear { variance } => {
                    for (i, r) in a.row_iter().enumerate() {
                        d[i] += variance * r.norm_squared();
                    }
                }
                KernelTerm::White { .. } => {}
            }
        }
        d
    }

    /// Contracts `W` against the derivatives of the noise-free cross-covariance.
    pub fn cross_grads(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> KernelGrads {
        let q = a.ncols();
        let mut d_a = DMatrix::zeros(a.nrows(), q);
        let mut d_b = DMatrix::zeros(b.nrows(), q);
        let mut d_params = Vec::with_capacity(self.n_params());
        let mut d2: Option<DMatrix<f64>> = None;
        for t in &self.terms {
            match *t {
                KernelTerm::Rbf { variance, lengthscale } => {
                    let d = d2.get_or_insert_with(|| sq_dists(a, b));
                    let l2 = lengthscale * lengthscale;
                    let s = -0.5 / l2;
                    // P = W ∘ K_rbf
                    let mut p = d.map(|dv| variance * exp(s * dv));
                    p.component_mul_assign(w);
                    let total: f64 = p.sum();
                    d_params.push(total / variance);
                    d_params.push(p.iter().zip(d.iter()).map(|(pv, dv)| pv * dv).sum::<f64>() / (l2 * lengthscale));
                    let row_sums = p.column_sum();
                    let col_sums = p.row_sum();
                    let pb = &p * b;
                    let pta = p.transpose() * a;
                    for i in 0..a.nrows() {
                        for c in 0..q {
                            d_a[(i, c)] -= (row_sums[i] * a[(i, c)] - pb[(i, c)]) / l2;
                        }
                    }
                    for j in 0..b.nrows() {
                        for c in 0..q {
                            d_b[(j, c)] += (pta[(j, c)] - col_sums[j] * b[(j, c)]) / l2;
                        }
                    }
                }
                KernelTerm::Linear { variance } => {
                    let ab = a * b.transpose();
                    d_params.push(ab.iter().zip(w.iter()).map(|(x, y)| x * y).sum());
                    d_a += (w * b) * variance;
                    d_b += (w.transpose() * a) * variance;
                }
                KernelTerm::Bias { .. } => d_params.push(w.sum()),
                KernelTerm::White { .. } => d_params.push(0.0),
            }
        }
        KernelGrads { d_a, d_b, d_params }
    }

    /// Contracts `W` against the derivatives of [`KernelSpec::gram`]; the
    /// returned `d_a` is the total derivative w.r.t. the shared point set.
    pub fn gram_grads(&self, a: &DMatrix<f64>, w: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let g = self.cross_grads(a, a, w);
        let mut d_params = g.d_params;
        let trace = w.trace();
        let mut idx = 0;
        for t in &self.terms {
            if let KernelTerm::White { .. } = t {
                d_params[idx] = trace;
            }
            idx += t.n_params();
        }
        (g.d_a + g.d_b, d_params)
    }

    /// Contracts `g` against the derivatives of [`KernelSpec::diag`].
    pub fn diag_grads(&self, a: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let mut d_a = DMatrix::zeros(a.nrows(), a.ncols());
        let mut d_params = Vec::with_capacity(self.n_params());
        for t in &self.terms {
            match *t {
                KernelTerm::Rbf { .. } => {
                    d_params.push(g.sum());
                    d_params.push(0.0);
                }
                KernelTerm::Bias { .. } => d_params.push(g.sum()),
                KernelTerm::Linear { variance } => {
                    let mut s = 0.0;
                    for i in 0..a.nrows() {
                        s += g[i] * a.row(i).norm_squared();
                        for c in 0..a.ncols() {
                            d_a[(i, c)] += 2.0 * variance * g[i] * a[(i, c)];
                        }
                    }
                    d_params.push(s);
                }
                KernelTerm::White { .. } => d_params.push(0.0),
            }
        }
        (d_a, d_params)
    }
}

fn check_inputs(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    spec.validate()?;
    if a.ncols() != b.ncols() {
        return Err(shape_err!("point sets have {} and {} columns", a.ncols(), b.ncols()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel inputs".into()));
    }
    Ok(())
}

/// `K(A, B)` with shape and finiteness checks.
pub fn kernel_eval(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_inputs(spec, a, b)?;
    Ok(spec.cross(a, b))
}

/// Full derivative tensors of `K(A, B)` w.r.t. every hyperparameter and every
/// coordinate of `A`.
pub fn kernel_grad(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<KernelGrad> {
    check_inputs(spec, a, b)?;
    let (n, m, q) = (a.nrows(), b.nrows(), a.ncols());
    let mut params = Vec::with_capacity(spec.n_params());
    let mut wrt_a: Vec<DMatrix<f64>> = (0..q).map(|_| DMatrix::zeros(n, m)).collect();
    let d2 = sq_dists(a, b);
    for t in &spec.terms {
        match *t {
            KernelTerm::Rbf { variance, lengthscale } => {
                let l2 = lengthscale * lengthscale;
                let k = d2.map(|d| variance * exp(-0.5 * d / l2));
                params.push(&k / variance);
                params.push(k.zip_map(&d2, |kv, dv| kv * dv / (l2 * lengthscale)));
                for (c, g) in wrt_a.iter_mut().enumerate() {
                    for i in 0..n {
                        for j in 0..m {
                            g[(i, j)] -= k[(i, j)] * (a[(i, c)] - b[(j, c)]) / l2;
                        }
                    }
                }
            }
            KernelTerm::Linear { variance } => {
                params.push(a * b.transpose());
                for (c, g) in wrt_a.iter_mut().enumerate() {
                    for i in 0..n {
                        for j in 0..m {
                            g[(i, j)] += variance * b[(j, c)];
                        }
                    }
                }
            }
            KernelTerm::Bias { .. } => params.push(DMatrix::from_element(n, m, 1.0)),
            KernelTerm::White { .. } => params.push(DMatrix::zeros(n, m)),
        }
    }
    Ok(KernelGrad { params, wrt_a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.5..1.5))
    }

    fn full_spec() -> KernelSpec {
        KernelSpec::rbf(1.3, 0.8)
            .plus(KernelTerm::Linear { variance: 0.4 })
            .plus(KernelTerm::Bias { variance: 0.2 })
            .plus(KernelTerm::White { variance: 0.05 })
    }

    #[test]
    fn rbf_closed_form_values() {
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert_eq!(kernel_eval(&KernelSpec::rbf(1.0, 1.0), &a, &a).unwrap()[(0, 0)], 1.0);
        let k = kernel_eval(&KernelSpec::rbf(2.0, 0.5), &a, &b).unwrap()[(0, 0)];
        // 2·exp(−1/(2·0.25))
        assert!((k - 0.270_670_566_473_225_4).abs() < 1e-15);
    }

    #[test]
    fn linear_orthogonal_is_zero() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(kernel_eval(&KernelSpec::linear(1.0), &a, &b).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn dimension_mismatch_and_nan() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert!(matches!(kernel_eval(&KernelSpec::rbf(1.0, 1.0), &a, &b), Err(Error::Shape(_))));
        let mut c = DMatrix::zeros(2, 2);
        c[(0, 0)] = f64::NAN;
        assert!(matches!(kernel_eval(&KernelSpec::rbf(1.0, 1.0), &c, &a), Err(Error::NonFinite(_))));
        assert!(KernelSpec::new(vec![KernelTerm::Rbf { variance: -1.0, lengthscale: 1.0 }]).is_err());
    }

    #[test]
    fn variance_derivative_is_k_over_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 2);
        let b = rand_mat(&mut rng, 4, 2);
        let spec = KernelSpec::rbf(1.7, 0.9);
        let k = spec.cross(&a, &b);
        let g = kernel_grad(&spec, &a, &b).unwrap();
        assert!((&g.params[0] - &k / 1.7).norm() < 1e-14);
    }

    #[test]
    fn lengthscale_derivative_vanishes_at_zero_distance() {
        let a = DMatrix::from_row_slice(1, 2, &[0.3, -0.2]);
        let g = kernel_grad(&KernelSpec::rbf(1.0, 0.7), &a, &a).unwrap();
        assert_eq!(g.params[1][(0, 0)], 0.0);
    }

    #[test]
    fn cross_is_transpose_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 5, 3);
        let b = rand_mat(&mut rng, 4, 3);
        let spec = full_spec();
        assert_eq!(spec.cross(&a, &b), spec.cross(&b, &a).transpose());
    }

    #[test]
    fn diag_matches_cross_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 6, 3);
        let spec = full_spec();
        let k = spec.cross(&a, &a);
        assert!((k.diagonal() - spec.diag(&a)).norm() < 1e-12);
    }

    #[test]
    fn contracted_grads_agree_with_full_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 2);
        let b = rand_mat(&mut rng, 3, 2);
        let w = rand_mat(&mut rng, 4, 3);
        let spec = full_spec();
        let full = kernel_grad(&spec, &a, &b).unwrap();
        let con = spec.cross_grads(&a, &b, &w);
        for (p, m) in full.params.iter().enumerate() {
            assert!((frob(m, &w) - con.d_params[p]).abs() < 1e-12);
        }
        for c in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| full.wrt_a[c][(i, j)] * w[(i, j)]).sum();
                assert!((s - con.d_a[(i, c)]).abs() < 1e-12);
            }
        }
    }

    fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }
}
