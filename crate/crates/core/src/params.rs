//! Box-bounded log parameterization of kernel hyperparameters.
//!
//! A hyperparameter `θ ∈ [lo, hi]` is optimized through an unconstrained
//! coordinate `u` with `ln θ = ln lo + (ln hi − ln lo)·σ(u)`.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use libm::{exp, log as ln};

use crate::kernel::{KernelSpec, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }

    fn span(&self) -> (f64, f64) {
        let a = ln(self.lo);
        (a, ln(self.hi) - a)
    }

    pub fn to_free(&self, value: f64) -> f64 {
        let (a, w) = self.span();
        let s = ((ln(value) - a) / w).clamp(1e-6, 1.0 - 1e-6);
        ln(s / (1.0 - s))
    }

    /// Returns `(θ, dθ/du)`.
    pub fn from_free(&self, u: f64) -> (f64, f64) {
        let (a, w) = self.span();
        let s = 1.0 / (1.0 + exp(-u));
        let v = exp(a + w * s);
        (v, v * w * s * (1.0 - s))
    }
}

/// Bounds per hyperparameter kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub variance: Bounds,
    pub lengthscale: Bounds,
    pub noise: Bounds,
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            variance: Bounds::new(1e-6, 1e4),
            lengthscale: Bounds::new(1e-3, 1e3),
            noise: Bounds::new(1e-6, 1e2),
        }
    }
}

impl HyperBounds {
    /// Default bounds with a higher noise floor. A dynamical GP fit to a
    /// single trajectory otherwise drives its noise to the lower bound.
    pub fn dynamics_default() -> Self {
        HyperBounds {
            noise: Bounds::new(1e-4, 1e2),
            ..HyperBounds::default()
        }
    }

    pub fn for_kind(&self, kind: ParamKind) -> Bounds {
        match kind {
            ParamKind::Variance => self.variance,
            ParamKind::Lengthscale => self.lengthscale,
            ParamKind::Noise => self.noise,
        }
    }

    pub fn encode(&self, kernel: &KernelSpec) -> Vec<f64> {
        kernel
            .params()
            .iter()
            .zip(kernel.param_kinds())
            .map(|(&v, k)| self.for_kind(k).to_free(v))
            .collect()
    }

    /// Writes decoded values into `kernel` and returns `dθ/du` per parameter.
    pub fn decode(&self, kernel: &mut KernelSpec, free: &[f64]) -> Vec<f64> {
        let kinds = kernel.param_kinds();
        let (vals, jac): (Vec<f64>, Vec<f64>) = free
            .iter()
            .zip(kinds)
            .map(|(&u, k)| self.for_kind(k).from_free(u))
            .unzip();
        kernel.set_params(&vals);
        jac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_jacobian() {
        let b = Bounds::new(1e-4, 1e2);
        for v in [1e-3, 0.5, 7.0, 50.0] {
            let u = b.to_free(v);
            let (back, d) = b.from_free(u);
            assert!((back - v).abs() < 1e-9 * v);
            let h = 1e-6;
            let fd = (b.from_free(u + h).0 - b.from_free(u - h).0) / (2.0 * h);
            assert!((fd - d).abs() < 1e-6 * d.abs().max(1e-8));
        }
    }

    #[test]
    fn saturates_inside_bounds() {
        let b = Bounds::new(1e-2, 1e1);
        assert!(b.from_free(-1e3).0 >= 1e-2 * (1.0 - 1e-12));
        assert!(b.from_free(1e3).0 <= 1e1 * (1.0 + 1e-12));
    }
}
