//! Classification and generation-quality metrics.

use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use libm::{log as ln, sqrt};

use crate::error::{shape_err, Error, Result};

/// Macro F1 over the classes present in `truths`.
pub fn f1_score(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    let per = per_class_f1(predictions, truths)?;
    Ok(per.iter().map(|(_, f)| f).sum::<f64>() / per.len() as f64)
}

/// `(class, F1)` for each class present in `truths`, ascending by class.
pub fn per_class_f1(predictions: &[usize], truths: &[usize]) -> Result<Vec<(usize, f64)>> {
    if predictions.len() != truths.len() {
        return Err(shape_err!("{} predictions for {} truths", predictions.len(), truths.len()));
    }
    if truths.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let mut classes: Vec<usize> = truths.to_vec();
    classes.sort_unstable();
    classes.dedup();
    Ok(classes
        .into_iter()
        .map(|c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for (&p, &t) in predictions.iter().zip(truths) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
            (c, f)
        })
        .collect())
}

fn point_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..a.ncols() {
        let d = a[(i, k)] - b[(j, k)];
        s += d * d;
    }
    sqrt(s)
}

/// Discrete Fréchet distance with Euclidean point distance.
pub fn discrete_frechet(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let (n, m) = (s1.nrows(), s2.nrows());
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if s1.ncols() != s2.ncols() {
        return Err(shape_err!("trajectories have {} and {} features", s1.ncols(), s2.ncols()));
    }
    let mut prev = alloc::vec![0.0f64; m];
    let mut cur = alloc::vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            let d = point_dist(s1, i, s2, j);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Largest pairwise Fréchet distance within a class set.
pub fn class_normalizer(class_sequences: &[DMatrix<f64>]) -> Result<f64> {
    if class_sequences.len() < 2 {
        return Err(Error::Undefined("class normalizer needs at least two sequences".into()));
    }
    let mut best = 0.0f64;
    for i in 0..class_sequences.len() {
        for j in i + 1..class_sequences.len() {
            best = best.max(discrete_frechet(&class_sequences[i], &class_sequences[j])?);
        }
    }
    if best <= 0.0 {
        return Err(Error::Undefined("degenerate class: all sequences identical".into()));
    }
    Ok(best)
}

/// `d_F(s_g, s_t)` divided by the class normalizer.
pub fn normalized_frechet(s_g: &DMatrix<f64>, s_t: &DMatrix<f64>, class_sequences: &[DMatrix<f64>]) -> Result<f64> {
    Ok(discrete_frechet(s_g, s_t)? / class_normalizer(class_sequences)?)
}

/// Outcome of averaging per-class distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetAverage {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes with no correctly classified pair.
    pub excluded: usize,
}

/// Mean over classes of the mean normalized distance of each class's
/// correctly classified pairs. Classes without pairs are excluded.
pub fn frechet_avg(per_class: &[Vec<f64>]) -> Result<FrechetAverage> {
    let means: Vec<Option<f64>> = per_class
        .iter()
        .map(|d| if d.is_empty() { None } else { Some(d.iter().sum::<f64>() / d.len() as f64) })
        .collect();
    let present: Vec<f64> = means.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Undefined("no correctly classified sequences".into()));
    }
    Ok(FrechetAverage {
        value: present.iter().sum::<f64>() / present.len() as f64,
        excluded: means.len() - present.len(),
        per_class: means,
    })
}

/// Default dampening window: 10% of the length, at least 2.
pub fn default_window(length: usize) -> usize {
    (length / 10).max(2)
}

/// Mean displacement over sliding windows of size `w`.
pub fn mean_displacement(s: &DMatrix<f64>, w: usize) -> Result<f64> {
    let n = s.nrows();
    if w == 0 || w >= n {
        return Err(Error::InvalidArgument(alloc::format!("window {w} invalid for length {n}")));
    }
    let total: f64 = (0..n - w).map(|i| point_dist(s, i + w, s, i)).sum();
    Ok(total / (n - w) as f64)
}

/// `d(truth) / d(generated)`; infinite when the generated motion is frozen.
pub fn dampening(truth: &DMatrix<f64>, generated: &DMatrix<f64>, w: usize) -> Result<f64> {
    let dt = mean_displacement(truth, w)?;
    let dg = mean_displacement(generated, w)?;
    if dg == 0.0 {
        return Ok(if dt == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(dt / dg)
}

/// First derivative along rows: central differences inside, second-order
/// one-sided differences at the ends.
fn derivative(x: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, x.ncols());
    for j in 0..x.ncols() {
        for i in 1..n - 1 {
            d[(i, j)] = (x[(i + 1, j)] - x[(i - 1, j)]) / (2.0 * dt);
        }
        if n >= 3 {
            d[(0, j)] = (-3.0 * x[(0, j)] + 4.0 * x[(1, j)] - x[(2, j)]) / (2.0 * dt);
            d[(n - 1, j)] = (3.0 * x[(n - 1, j)] - 4.0 * x[(n - 2, j)] + x[(n - 3, j)]) / (2.0 * dt);
        } else {
            d[(0, j)] = (x[(1, j)] - x[(0, j)]) / dt;
            d[(1, j)] = d[(0, j)];
        }
    }
    d
}

/// Third derivative along rows: the central five-point stencil inside,
/// second-order one-sided stencils at the ends.
fn third_derivative(x: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let h3 = dt * dt * dt;
    let mut d = DMatrix::zeros(n, x.ncols());
    for j in 0..x.ncols() {
        let v = |i: usize| x[(i, j)];
        if n < 6 {
            let c = (-v(0) + 3.0 * v(1) - 3.0 * v(2) + v(3)) / h3;
            for i in 0..n {
                d[(i, j)] = c;
            }
            continue;
        }
        for i in 0..n {
            d[(i, j)] = if i < 2 {
                (-5.0 * v(i) + 18.0 * v(i + 1) - 24.0 * v(i + 2) + 14.0 * v(i + 3) - 3.0 * v(i + 4)) / (2.0 * h3)
            } else if i + 2 >= n {
                (5.0 * v(i) - 18.0 * v(i - 1) + 24.0 * v(i - 2) - 14.0 * v(i - 3) + 3.0 * v(i - 4)) / (2.0 * h3)
            } else {
                (v(i + 2) - 2.0 * v(i + 1) + 2.0 * v(i - 1) - v(i - 2)) / (2.0 * h3)
            };
        }
    }
    d
}

/// Log dimensionless jerk of a sampled trajectory (rows are time steps).
pub fn ldj(trajectory: &DMatrix<f64>, dt: f64) -> Result<f64> {
    let n = trajectory.nrows();
    if n < 4 {
        return Err(Error::TooShort(alloc::format!("LDJ needs at least 4 samples, got {n}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!("time step {dt} must be positive")));
    }
    let vel = derivative(trajectory, dt);
    let jerk = third_derivative(trajectory, dt);
    let peak = vel.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Undefined("trajectory never moves".into()));
    }
    let sq: Vec<f64> = jerk.row_iter().map(|r| r.norm_squared()).collect();
    let integral: f64 = sq.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
    let duration = (n - 1) as f64 * dt;
    Ok(-ln(duration * duration * duration / (peak * peak) * integral))
}

/// `η_g / η_t` oriented so that values above 1 mean the generated motion
/// is less smooth. Both negative: `η_g / η_t`; both positive: `η_t / η_g`.
pub fn ldj_ratio(truth: &DMatrix<f64>, generated: &DMatrix<f64>, dt: f64) -> Result<f64> {
    let et = ldj(truth, dt)?;
    let eg = ldj(generated, dt)?;
    if et < 0.0 && eg < 0.0 {
        Ok(eg / et)
    } else if et > 0.0 && eg > 0.0 {
        Ok(et / eg)
    } else {
        Err(Error::Undefined(alloc::format!("LDJ values {et} and {eg} differ in sign")))
    }
}

/// One test sequence's outcome fed to [`MetricsReport::build`].
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub truth_class: usize,
    pub predicted: usize,
    pub generated: DMatrix<f64>,
    pub remainder: DMatrix<f64>,
    /// The complete ground-truth test sequence, prefix included.
    pub sequence: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub f1: f64,
    pub frechet: Option<f64>,
    pub dampening: Option<f64>,
    pub ldj_ratio: Option<f64>,
    pub n_test: usize,
    pub n_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1_macro: f64,
    /// `None` when no class has a correctly classified sequence.
    pub frechet_avg: Option<f64>,
    pub dampening_ratio: Option<f64>,
    pub ldj_ratio: Option<f64>,
    pub excluded_classes: usize,
    pub per_class: Vec<ClassMetrics>,
}

fn mean_of_present(v: &[Option<f64>]) -> Option<f64> {
    let p: Vec<f64> = v.iter().flatten().copied().collect();
    if p.is_empty() {
        None
    } else {
        Some(p.iter().sum::<f64>() / p.len() as f64)
    }
}

impl MetricsReport {
    /// Scores a batch of test outcomes. Distances, dampening and LDJ ratios
    /// use only correctly classified items, averaged within each class and
    /// then across classes. The Fréchet normalizer of a class is taken over
    /// the complete test sequences of that class; a class with fewer than
    /// two distinct sequences has no distance. LDJ ratios that are
    /// undefined because the two values differ in sign are left out.
    pub fn build(items: &[EvalItem], class_labels: &[String], dt: f64, window: Option<usize>) -> Result<MetricsReport> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("no test items".into()));
        }
        for it in items {
            if it.truth_class >= class_labels.len() || it.predicted >= class_labels.len() {
                return Err(Error::InvalidArgument("class index out of range".into()));
            }
        }
        let preds: Vec<usize> = items.iter().map(|i| i.predicted).collect();
        let truths: Vec<usize> = items.iter().map(|i| i.truth_class).collect();
        let f1s = per_class_f1(&preds, &truths)?;
        let f1_macro = f1s.iter().map(|(_, f)| f).sum::<f64>() / f1s.len() as f64;
        let mut per_class = Vec::new();
        let mut distances = Vec::new();
        for (c, f1) in f1s {
            let members: Vec<&EvalItem> = items.iter().filter(|i| i.truth_class == c).collect();
            let correct: Vec<&&EvalItem> = members.iter().filter(|i| i.predicted == c).collect();
            let sequences: Vec<DMatrix<f64>> = members.iter().map(|i| i.sequence.clone()).collect();
            let mut d = Vec::new();
            let mut damp = Vec::new();
            let mut ratio = Vec::new();
            if !correct.is_empty() {
                let norm = match class_normalizer(&sequences) {
                    Ok(n) => Some(n),
                    Err(Error::Undefined(_)) => None,
                    Err(e) => return Err(e),
                };
                for it in &correct {
                    if let Some(norm) = norm {
                        d.push(discrete_frechet(&it.generated, &it.remainder)? / norm);
                    }
                    let w = window.unwrap_or_else(|| default_window(it.remainder.nrows()));
                    damp.push(dampening(&it.remainder, &it.generated, w)?);
                    match ldj_ratio(&it.remainder, &it.generated, dt) {
                        Ok(r) => ratio.push(r),
                        Err(Error::Undefined(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            let avg = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
            per_class.push(ClassMetrics {
                label: class_labels[c].clone(),
                f1,
                frechet: avg(&d),
                dampening: avg(&damp),
                ldj_ratio: avg(&ratio),
                n_test: members.len(),
                n_correct: correct.len(),
            });
            distances.push(d);
        }
        let (frechet_avg, excluded) = match frechet_avg(&distances) {
            Ok(a) => (Some(a.value), a.excluded),
            Err(Error::Undefined(_)) => (None, distances.len()),
            Err(e) => return Err(e),
        };
        let damp: Vec<Option<f64>> = per_class.iter().map(|c| c.dampening).collect();
        let ratio: Vec<Option<f64>> = per_class.iter().map(|c| c.ldj_ratio).collect();
        Ok(MetricsReport {
            f1_macro,
            frechet_avg,
            dampening_ratio: mean_of_present(&damp),
            ldj_ratio: mean_of_present(&ratio),
            excluded_classes: excluded,
            per_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let f = f1_score(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score(&[1], &[0]).unwrap(), 0.0);
        assert!(f1_score(&[1, 0], &[0]).is_err());
        assert!(f1_score(&[], &[]).is_err());
    }

    #[test]
    fn frechet_parallel_offset() {
        let a = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let b = a.map(|v| v) + DMatrix::from_fn(4, 2, |_, j| if j == 1 { 0.3 } else { 0.0 });
        assert!((discrete_frechet(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(discrete_frechet(&a, &a).unwrap(), 0.0);
        assert!(discrete_frechet(&a, &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn normalized_frechet_self_pair_is_one() {
        let a = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let b = DMatrix::from_row_slice(3, 1, &[0.5, 1.5, 2.5]);
        let c = DMatrix::from_row_slice(3, 1, &[0.1, 1.1, 2.1]);
        let set = [a.clone(), b.clone(), c];
        assert!((normalized_frechet(&a, &b, &set).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(normalized_frechet(&a, &a, &set).unwrap(), 0.0);
        assert!(normalized_frechet(&a, &b, &[a.clone(), a.clone()]).is_err());
    }

    #[test]
    fn frechet_avg_exclusion() {
        let r = frechet_avg(&[alloc::vec![0.2], alloc::vec![0.4, 0.4], alloc::vec![]]).unwrap();
        assert!((r.value - 0.3).abs() < 1e-15);
        assert_eq!(r.excluded, 1);
        assert!(matches!(frechet_avg(&[alloc::vec![], alloc::vec![]]), Err(Error::Undefined(_))));
    }

    #[test]
    fn dampening_examples() {
        let s = DMatrix::from_fn(30, 2, |i, j| ((i as f64) * 0.3 + j as f64).sin());
        assert_eq!(dampening(&s, &s, 3).unwrap(), 1.0);
        let centroid = s.row_mean();
        let mut half = s.clone();
        for mut r in half.row_iter_mut() {
            let v = (&r - &centroid) * 0.5 + &centroid;
            r.copy_from(&v);
        }
        assert!((dampening(&s, &half, 3).unwrap() - 2.0).abs() < 1e-12);
        let frozen = DMatrix::from_element(30, 2, 0.7);
        assert_eq!(dampening(&s, &frozen, 3).unwrap(), f64::INFINITY);
        assert!(dampening(&s, &s, 30).is_err());
        assert_eq!(default_window(100), 10);
        assert_eq!(default_window(12), 2);
    }

    #[test]
    fn ldj_requires_motion_and_length() {
        assert!(ldj(&DMatrix::zeros(10, 1), 0.1).is_err());
        assert!(ldj(&DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]), 0.1).is_err());
    }
}
