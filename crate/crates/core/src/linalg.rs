//! Positive-definite factorizations with escalating jitter.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};
use libm::log as ln;

use crate::error::{shape_err, Error, Result};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// A symmetric covariance matrix together with the diagonal jitter that was
/// needed to factorize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    #[serde(with = "crate::serde_mat")]
    pub values: DMatrix<f64>,
    pub jitter_applied: f64,
}

impl GramMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        GramMatrix {
            values,
            jitter_applied: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

/// Cholesky factor of a (possibly jittered) positive-definite matrix.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl PsdFactor {
    /// Factorizes `k`, adding `jitter·I` in decades from `1e-8·mean(diag)` up
    /// to `1e-2·mean(diag)` when the plain factorization fails.
    pub fn new(k: &DMatrix<f64>) -> Result<Self> {
        if !k.is_square() {
            return Err(shape_err!("expected square matrix, got {}x{}", k.nrows(), k.ncols()));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance matrix".into()));
        }
        if let Some(chol) = Cholesky::new(k.clone()) {
            return Ok(PsdFactor { chol, jitter: 0.0 });
        }
        let n = k.nrows();
        let mean_diag = if n == 0 {
            1.0
        } else {
            k.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64
        };
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut rel = JITTER_START;
        let mut tried = 0.0;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            tried = jitter;
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(kj) {
                return Ok(PsdFactor { chol, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Singular { jitter: tried })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = K + jitter·I`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(shape_err!(
                "right-hand side has {} rows, matrix is {}x{}",
                b.nrows(),
                self.dim(),
                self.dim()
            ));
        }
        Ok(self.chol.solve(b))
    }

    /// Solves `L·X = B` for the lower Cholesky factor.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        l.solve_lower_triangular(b)
            .unwrap_or_else(|| DMatrix::from_element(b.nrows(), b.ncols(), f64::NAN))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| ln(l[(i, i)])).sum::<f64>()
    }

    pub fn to_gram(&self, k: DMatrix<f64>) -> GramMatrix {
        GramMatrix {
            values: k,
            jitter_applied: self.jitter,
        }
    }
}

/// Solves `K·X = B` for positive-definite `K`.
pub fn psd_solve(k: &GramMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    PsdFactor::new(&k.values)?.solve(b)
}

/// `log|K|` from the Cholesky diagonal.
pub fn log_det_psd(k: &GramMatrix) -> Result<f64> {
    Ok(PsdFactor::new(&k.values)?.log_det())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.transpose() * &a + DMatrix::identity(n, n)
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let k = GramMatrix::new(DMatrix::identity(3, 3));
        let b = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 3.5]);
        assert_eq!(psd_solve(&k, &b).unwrap(), b);
    }

    #[test]
    fn diagonal_solve() {
        let k = GramMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 4.0])));
        let b = DMatrix::from_column_slice(2, 1, &[2.0, 4.0]);
        let x = psd_solve(&k, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        for seed in 0..10 {
            let k = random_spd(5, seed);
            let b = DMatrix::from_fn(5, 2, |i, j| (i + 3 * j) as f64 - 2.0);
            let x = psd_solve(&GramMatrix::new(k.clone()), &b).unwrap();
            assert!((&k * x - &b).norm() <= 1e-8);
        }
    }

    #[test]
    fn log_det_known_values() {
        assert_eq!(log_det_psd(&GramMatrix::new(DMatrix::identity(4, 4))).unwrap(), 0.0);
        let e = core::f64::consts::E;
        let k = GramMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![e, e])));
        assert!((log_det_psd(&k).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn log_det_matches_direct_determinant() {
        for seed in 0..10 {
            let k = random_spd(4, 100 + seed);
            let direct = k.determinant().ln();
            let ld = log_det_psd(&GramMatrix::new(k)).unwrap();
            assert!((ld - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn rank_deficient_gets_jitter() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let k = &v * v.transpose();
        let f = PsdFactor::new(&k).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn negative_definite_reports_final_jitter() {
        let k = -DMatrix::<f64>::identity(2, 2);
        match PsdFactor::new(&k) {
            Err(Error::Singular { jitter }) => assert!((jitter - 1e-2).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn solve_rejects_bad_rhs() {
        let f = PsdFactor::new(&DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(f.solve(&DMatrix::zeros(2, 1)), Err(Error::Shape(_))));
    }
}
