//! Geometry-embedded latent initialization: a velocity-weighted progression
//! variable per sequence, Fourier features of that progression, principal
//! component scores of the stacked data, and their concatenation.

use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use libm::{cos, sin, sqrt};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Fraction of the mean frame velocity used as the default `epsilon` in
/// [`progression`].
pub const DEFAULT_EPSILON_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Fourier order `m`; 0 disables the geometric block.
    pub fourier_order: usize,
    pub include_constant: bool,
    /// Number of principal-component columns `r`; 0 disables the block.
    pub reduction_dims: usize,
    pub markov_order: usize,
    /// Absolute `epsilon` for [`progression`]; `None` uses
    /// `DEFAULT_EPSILON_FRACTION × mean velocity`.
    pub epsilon: Option<f64>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            fourier_order: 1,
            include_constant: true,
            reduction_dims: 2,
            markov_order: 1,
            epsilon: None,
        }
    }
}

impl LatentConfig {
    pub fn geometry_dims(&self) -> usize {
        if self.fourier_order == 0 {
            0
        } else {
            2 * self.fourier_order + usize::from(self.include_constant)
        }
    }

    /// Total latent dimension `Q`.
    pub fn latent_dims(&self) -> usize {
        self.geometry_dims() + self.reduction_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dims() == 0 {
            return Err(Error::InvalidArgument("latent space has zero dimensions".into()));
        }
        if !(1..=2).contains(&self.markov_order) {
            return Err(Error::InvalidArgument(alloc::format!(
                "Markov order must be 1 or 2, got {}",
                self.markov_order
            )));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::InvalidArgument("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Monotone progression variable running from 0 to 2π.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionVector {
    pub theta: Vec<f64>,
}

/// Concatenated latent initialization `X = [X_G, X_R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentInit {
    pub x_g: DMatrix<f64>,
    pub x_r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

/// Builds θ with increments inversely proportional to frame velocity.
///
/// Increment `i` (between rows `i` and `i+1`) is proportional to
/// `1 / (‖y_{i+1} − y_i‖ + epsilon)`, normalized so the increments sum to 2π.
pub fn progression(values: &DMatrix<f64>, epsilon: Option<f64>) -> Result<ProgressionVector> {
    let n = values.nrows();
    if n < 2 {
        return Err(Error::TooShort(alloc::format!("progression needs at least 2 steps, got {n}")));
    }
    let velocities: Vec<f64> = (0..n - 1)
        .map(|i| (values.row(i + 1) - values.row(i)).norm())
        .collect();
    let mean_v = velocities.iter().sum::<f64>() / velocities.len() as f64;
    let eps = epsilon.unwrap_or(DEFAULT_EPSILON_FRACTION * mean_v);
    let weights: Vec<f64> = if eps > 0.0 {
        velocities.iter().map(|v| 1.0 / (v + eps)).collect()
    } else {
        // no motion at all: uniform progression
        alloc::vec![1.0; n - 1]
    };
    let total: f64 = weights.iter().sum();
    let mut theta = Vec::with_capacity(n);
    let mut acc = 0.0;
    theta.push(0.0);
    for w in &weights {
        acc += w / total;
        theta.push(acc * TWO_PI);
    }
    theta[n - 1] = TWO_PI;
    Ok(ProgressionVector { theta })
}

/// Frequency multiplier of the `j`-th (1-based) cosine/sine pair: the pair
/// is `cos(k·π·θ), sin(k·π·θ)` with `k = j + 1`.
pub fn fourier_frequency(j: usize) -> f64 {
    (j + 1) as f64
}

/// `[1, cos(2πθ), sin(2πθ), …]` with `m` cosine/sine pairs.
pub fn fourier_features(theta: &[f64], m: usize, include_constant: bool) -> Result<DMatrix<f64>> {
    if m < 1 {
        return Err(Error::InvalidArgument("Fourier order must be at least 1".into()));
    }
    let offset = usize::from(include_constant);
    let mut out = DMatrix::zeros(theta.len(), 2 * m + offset);
    for (i, &t) in theta.iter().enumerate() {
        if include_constant {
            out[(i, 0)] = 1.0;
        }
        for j in 1..=m {
            let arg = fourier_frequency(j) * PI * t;
            out[(i, offset + 2 * (j - 1))] = cos(arg);
            out[(i, offset + 2 * (j - 1) + 1)] = sin(arg);
        }
    }
    Ok(out)
}

/// Principal-component projection fitted on a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `D × r`, columns ordered by decreasing singular value.
    pub loadings: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl Pca {
    pub fn fit(y: &DMatrix<f64>, r: usize) -> Result<Pca> {
        let (n, d) = y.shape();
        if r == 0 || r > n.min(d) {
            return Err(Error::InvalidArgument(alloc::format!(
                "cannot take {r} principal components of a {n}x{d} matrix"
            )));
        }
        let mean = y.row_mean().transpose();
        let mut centered = y.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let svd = SVD::new(centered, false, true);
        let v_t = svd.v_t.expect("requested V");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut loadings = DMatrix::zeros(d, r);
        let mut sv = DVector::zeros(r);
        for (c, &k) in order.iter().take(r).enumerate() {
            let mut col: DVector<f64> = v_t.row(k).transpose();
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 + 1e-12 { (i, v.abs()) } else { best });
            if col[imax] < 0.0 {
                col.neg_mut();
            }
            loadings.set_column(c, &col);
            sv[c] = svd.singular_values[k];
        }
        Ok(Pca {
            mean,
            loadings,
            singular_values: sv,
        })
    }

    pub fn transform(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = y.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * &self.loadings
    }
}

/// Mean-centered principal-component scores on the top `r` components.
pub fn pca_features(y: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    Ok(Pca::fit(y, r)?.transform(y))
}

/// Stacks per-sequence Fourier blocks in dataset order next to principal
/// component scores of the stacked observations.
///
/// The score block is rescaled by one scalar so its leading column has unit
/// standard deviation, putting it on the same footing as the bounded
/// Fourier columns.
pub fn build_latent_init(dataset: &Dataset, config: &LatentConfig) -> Result<LatentInit> {
    config.validate()?;
    let len = dataset.length;
    for s in &dataset.sequences {
        if s.len() != len {
            return Err(shape_err!("ragged sequence lengths ({} vs {len})", s.len()));
        }
    }
    let n = dataset.sequences.len() * len;
    let mut x_g = DMatrix::zeros(n, config.geometry_dims());
    if config.fourier_order > 0 {
        for (k, s) in dataset.sequences.iter().enumerate() {
            let theta = progression(&s.values, config.epsilon)?;
            let block = fourier_features(&theta.theta, config.fourier_order, config.include_constant)?;
            x_g.rows_mut(k * len, len).copy_from(&block);
        }
    }
    let x_r = if config.reduction_dims > 0 {
        let scores = pca_features(&dataset.stacked(), config.reduction_dims)?;
        let sd = column_std(&scores, 0);
        if sd > 0.0 {
            scores / sd
        } else {
            scores
        }
    } else {
        DMatrix::zeros(n, 0)
    };
    let mut x = DMatrix::zeros(n, x_g.ncols() + x_r.ncols());
    x.columns_mut(0, x_g.ncols()).copy_from(&x_g);
    x.columns_mut(x_g.ncols(), x_r.ncols()).copy_from(&x_r);
    Ok(LatentInit { x_g, x_r, x })
}

fn column_std(m: &DMatrix<f64>, c: usize) -> f64 {
    let col = m.column(c);
    let mean = col.mean();
    sqrt(col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequence;
    use alloc::vec;

    fn ramp(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |i, j| (i as f64) * (j as f64 + 1.0))
    }

    #[test]
    fn constant_velocity_gives_linear_theta() {
        let p = progression(&ramp(9), None).unwrap();
        for (i, t) in p.theta.iter().enumerate() {
            assert!((t - TWO_PI * i as f64 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps() {
        let p = progression(&ramp(2), None).unwrap();
        assert_eq!(p.theta, vec![0.0, TWO_PI]);
    }

    #[test]
    fn fast_segment_gets_half_increment() {
        // five unit steps, the third one is twice as fast
        let steps = [1.0, 1.0, 2.0, 1.0, 1.0];
        let mut v = DMatrix::zeros(6, 1);
        for i in 0..5 {
            v[(i + 1, 0)] = v[(i, 0)] + steps[i];
        }
        let p = progression(&v, Some(1e-12)).unwrap();
        let inc: Vec<f64> = p.theta.windows(2).map(|w| w[1] - w[0]).collect();
        // weights 1,1,1/2,1,1 → total 4.5
        assert!((inc[2] - 0.5 * inc[0]).abs() < 1e-9);
        assert!((inc[0] - TWO_PI / 4.5).abs() < 1e-9);
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(matches!(progression(&DMatrix::zeros(1, 3), None), Err(Error::TooShort(_))));
    }

    #[test]
    fn frozen_sequence_is_uniform() {
        let p = progression(&DMatrix::zeros(5, 2), None).unwrap();
        assert!((p.theta[2] - PI).abs() < 1e-12);
    }

    #[test]
    fn fourier_rows() {
        let f = fourier_features(&[0.0, 0.5], 1, true).unwrap();
        assert_eq!(f.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
        assert!((f[(1, 1)] + 1.0).abs() < 1e-15);
        assert!(f[(1, 2)].abs() < 1e-15);
        assert_eq!(fourier_features(&[0.1], 3, true).unwrap().ncols(), 7);
        assert_eq!(fourier_features(&[0.1], 3, false).unwrap().ncols(), 6);
        assert!(fourier_features(&[0.1], 0, true).is_err());
    }

    #[test]
    fn pca_full_rank_reconstruction() {
        let y = DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * (i * j) as f64);
        let pca = Pca::fit(&y, 3).unwrap();
        let scores = pca.transform(&y);
        let mut rec = scores * pca.loadings.transpose();
        for mut row in rec.row_iter_mut() {
            row += pca.mean.transpose();
        }
        assert!((rec - y).norm() < 1e-8);
    }

    #[test]
    fn pca_rank_one_and_duplicates() {
        let dir = DVector::from_vec(vec![0.6, -0.8, 0.0]);
        let coords = [0.0, 1.0, 3.0, 3.0, -2.0];
        let y = DMatrix::from_fn(5, 3, |i, j| coords[i] * dir[j]);
        let s = pca_features(&y, 1).unwrap();
        let mean = coords.iter().sum::<f64>() / 5.0;
        // loading sign makes the largest loading (|−0.8|) positive, so scores flip
        for i in 0..5 {
            assert!((s[(i, 0)] + (coords[i] - mean)).abs() < 1e-10);
        }
        assert_eq!(s.row(2), s.row(3));
        assert!(pca_features(&y, 4).is_err());
    }

    #[test]
    fn latent_init_shapes() {
        let mk = |label: &str, phase: f64| {
            Sequence::new(
                DMatrix::from_fn(10, 4, |i, j| ((i as f64) * 0.3 + phase + j as f64).sin()),
                label,
                label,
                0.1,
            )
            .unwrap()
        };
        let ds = Dataset::new("t", vec![mk("a", 0.0), mk("b", 1.0), mk("c", 0.0)], vec![]).unwrap();
        let cfg = LatentConfig {
            fourier_order: 2,
            include_constant: true,
            reduction_dims: 3,
            ..Default::default()
        };
        let init = build_latent_init(&ds, &cfg).unwrap();
        assert_eq!(init.x.shape(), (30, 8));
        assert_eq!(cfg.latent_dims(), 8);
        assert_eq!(init.x_g.rows(0, 10), init.x_g.rows(20, 10));
        assert!(init.x_g.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(init.x.columns(0, 5), init.x_g.columns(0, 5));
        assert_eq!(init.x.columns(5, 3), init.x_r.columns(0, 3));
        assert_eq!(build_latent_init(&ds, &cfg).unwrap().x, init.x);
    }
}
