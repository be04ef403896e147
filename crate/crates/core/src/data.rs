//! Labeled multivariate sequences and equal-length datasets.

use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// One labeled trajectory, rows are time steps and columns features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    #[serde(with = "crate::serde_mat")]
    pub values: DMatrix<f64>,
    pub class_label: String,
    pub source_id: String,
    pub dt: f64,
}

impl Sequence {
    pub fn new(values: DMatrix<f64>, class_label: impl Into<String>, source_id: impl Into<String>, dt: f64) -> Result<Self> {
        let s = Sequence {
            values,
            class_label: class_label.into(),
            source_id: source_id.into(),
            dt,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() < 2 {
            return Err(Error::TooShort(alloc::format!(
                "sequence `{}` has {} time steps, need at least 2",
                self.source_id,
                self.values.nrows()
            )));
        }
        if self.values.ncols() == 0 {
            return Err(shape_err!("sequence `{}` has no features", self.source_id));
        }
        if let Some((idx, _)) = self.values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let n = self.values.nrows();
            return Err(Error::NonFinite(alloc::format!(
                "sequence `{}` row {} column {}",
                self.source_id,
                idx % n,
                idx / n
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> DMatrix<f64> {
        self.values.rows(start, end - start).into_owned()
    }
}

/// Per-feature linear interpolation onto `target` equally spaced samples of
/// normalized time. Endpoints are preserved exactly.
pub fn resample(sequence: &Sequence, target: usize) -> Result<Sequence> {
    if target < 2 {
        return Err(Error::InvalidArgument(alloc::format!("resample target {target} < 2")));
    }
    let n = sequence.len();
    if n < 2 {
        return Err(Error::TooShort("cannot resample fewer than 2 samples".into()));
    }
    let d = sequence.dim();
    let values = if target == n {
        sequence.values.clone()
    } else {
        let mut out = DMatrix::zeros(target, d);
        let scale = (n - 1) as f64 / (target - 1) as f64;
        for i in 0..target {
            if i == target - 1 {
                out.row_mut(i).copy_from(&sequence.values.row(n - 1));
                continue;
            }
            let pos = i as f64 * scale;
            let lo = (pos as usize).min(n - 2);
            let frac = pos - lo as f64;
            for c in 0..d {
                let a = sequence.values[(lo, c)];
                let b = sequence.values[(lo + 1, c)];
                out[(i, c)] = if frac == 0.0 { a } else { a + frac * (b - a) };
            }
        }
        out
    };
    let dt = sequence.dt * (n - 1) as f64 / (target - 1) as f64;
    Ok(Sequence {
        values,
        class_label: sequence.class_label.clone(),
        source_id: sequence.source_id.clone(),
        dt,
    })
}

/// Equal-length sequences with an ordered class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub sequences: Vec<Sequence>,
    /// Ordered unique class labels; class index `a` refers to `classes[a]`.
    pub classes: Vec<String>,
    pub dim: usize,
    pub length: usize,
}

impl Dataset {
    /// Builds a dataset; `classes` fixes the class order, or first-appearance
    /// order is used when it is empty.
    pub fn new(name: impl Into<String>, sequences: Vec<Sequence>, classes: Vec<String>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no sequences".into()))?;
        let (dim, length) = (first.dim(), first.len());
        let mut classes = classes;
        if classes.is_empty() {
            for s in &sequences {
                if !classes.contains(&s.class_label) {
                    classes.push(s.class_label.clone());
                }
            }
        }
        for s in &sequences {
            s.validate()?;
            if s.dim() != dim {
                return Err(shape_err!("sequence `{}` has {} features, expected {dim}", s.source_id, s.dim()));
            }
            if s.len() != length {
                return Err(shape_err!("sequence `{}` has length {}, expected {length}", s.source_id, s.len()));
            }
            if !classes.contains(&s.class_label) {
                return Err(Error::InvalidArgument(alloc::format!("unknown class `{}`", s.class_label)));
            }
        }
        for c in &classes {
            if !sequences.iter().any(|s| &s.class_label == c) {
                return Err(Error::MissingClass(c.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            sequences,
            classes,
            dim,
            length,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn class_of(&self, seq: usize) -> usize {
        self.class_index(&self.sequences[seq].class_label).expect("validated")
    }

    /// Sub-dataset with the given sequence indices, keeping the class order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let seqs = indices.iter().map(|&i| self.sequences[i].clone()).collect();
        Dataset::new(self.name.clone(), seqs, self.classes.clone())
    }

    /// Rows of all sequences stacked end to end.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.sequences.len() * self.length, self.dim);
        for (k, s) in self.sequences.iter().enumerate() {
            y.rows_mut(k * self.length, self.length).copy_from(&s.values);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn seq(values: DMatrix<f64>, label: &str) -> Sequence {
        Sequence::new(values, label, "s", 0.1).unwrap()
    }

    #[test]
    fn resample_identity() {
        let s = seq(DMatrix::from_fn(7, 2, |i, j| (i * i + j) as f64), "a");
        assert_eq!(resample(&s, 7).unwrap().values, s.values);
    }

    #[test]
    fn ramp_stays_a_ramp() {
        let s = seq(DMatrix::from_fn(11, 1, |i, _| 3.0 * i as f64 - 1.0), "a");
        for target in [2, 5, 21, 37] {
            let r = resample(&s, target).unwrap();
            for i in 0..target {
                let expected = -1.0 + 30.0 * i as f64 / (target - 1) as f64;
                assert!((r.values[(i, 0)] - expected).abs() < 1e-12);
            }
            assert_eq!(r.values[(0, 0)], -1.0);
            assert_eq!(r.values[(target - 1, 0)], 29.0);
        }
    }

    #[test]
    fn sine_downsample_error_small() {
        let n = 200;
        let f = |t: f64| (2.0 * core::f64::consts::PI * t).sin();
        let s = seq(DMatrix::from_fn(n, 1, |i, _| f(i as f64 / (n - 1) as f64)), "a");
        let r = resample(&s, 50).unwrap();
        for i in 0..50 {
            assert!((r.values[(i, 0)] - f(i as f64 / 49.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn resample_rejects_short_target() {
        let s = seq(DMatrix::zeros(3, 1), "a");
        assert!(resample(&s, 1).is_err());
    }

    #[test]
    fn dataset_validation() {
        let a = seq(DMatrix::zeros(4, 2), "a");
        let b = seq(DMatrix::zeros(5, 2), "b");
        assert!(matches!(Dataset::new("x", vec![a.clone(), b], vec![]), Err(Error::Shape(_))));
        let ds = Dataset::new("x", vec![a.clone()], vec![]).unwrap();
        assert_eq!(ds.classes, vec![String::from("a")]);
        assert!(matches!(
            Dataset::new("x", vec![a], vec!["a".into(), "b".into()]),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn nan_cell_is_named() {
        let mut v = DMatrix::zeros(3, 2);
        v[(2, 1)] = f64::NAN;
        let err = Sequence::new(v, "a", "file.csv", 0.1).unwrap_err();
        assert_eq!(err, Error::NonFinite("sequence `file.csv` row 2 column 1".into()));
    }
}
