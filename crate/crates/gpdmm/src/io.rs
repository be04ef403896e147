//! Manifests, per-sequence CSV files and the dataset loader.

use std::fs;
use std::path::{Path, PathBuf};

use gpdmm_core::{resample, Dataset, Sequence};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub label: String,
    /// Sequence files, relative to the manifest's directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub feature_count: usize,
    pub target_length: usize,
    pub dt: f64,
    /// Angle unit of the values; carried through untouched.
    pub unit: String,
    pub classes: Vec<ManifestClass>,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

impl Manifest {
    /// Reads a TOML manifest, or JSON when the extension is `.json`.
    pub fn read(path: &Path) -> AppResult<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let m: Manifest = if is_json(path) {
            serde_json::from_str(&text).map_err(|e| AppError::data(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| AppError::data(path, e.to_string()))?
        };
        m.validate(path)?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        let text = if is_json(path) {
            serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
        } else {
            toml::to_string(self).expect("manifest serializes")
        };
        fs::write(path, text).map_err(|e| AppError::io(path, e))
    }

    fn validate(&self, path: &Path) -> AppResult<()> {
        let bad = |m: String| Err(AppError::data(path, m));
        if self.feature_count == 0 {
            return bad("feature_count must be positive".into());
        }
        if self.target_length < 2 {
            return bad(format!("target_length must be at least 2, got {}", self.target_length));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.classes.is_empty() {
            return bad("manifest lists no classes".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.label == c.label) {
                return bad(format!("class `{}` listed twice", c.label));
            }
            if c.files.is_empty() {
                return bad(format!("class `{}` has no sequence files", c.label));
            }
        }
        Ok(())
    }
}

/// Reads one comma-delimited sequence file with no header.
pub fn read_sequence_csv(path: &Path, feature_count: usize) -> AppResult<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AppError::data(path, e.to_string()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AppError::data(path, format!("row {}: {e}", r + 1)))?;
        if record.len() != feature_count {
            return Err(AppError::data(path, format!("row {}: {} columns, expected {feature_count}", r + 1, record.len())));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| AppError::data(path, format!("row {}, column {}: cannot parse `{field}`", r + 1, c + 1)))?;
            if !v.is_finite() {
                return Err(AppError::data(path, format!("row {}, column {}: non-finite value `{field}`", r + 1, c + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows < 2 {
        return Err(AppError::data(path, format!("{rows} rows, need at least 2")));
    }
    Ok(DMatrix::from_row_slice(rows, feature_count, &data))
}

/// Writes values with shortest round-trip formatting, LF line endings.
pub fn write_sequence_csv(path: &Path, values: &DMatrix<f64>) -> AppResult<()> {
    let mut out = String::with_capacity(values.len() * 20);
    for r in 0..values.nrows() {
        for c in 0..values.ncols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:?}", values[(r, c)]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| AppError::io(path, e))
}

/// Loads every file listed by the manifest, resampled to its target length.
pub fn load_dataset(manifest_path: &Path) -> AppResult<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let jobs: Vec<(String, PathBuf)> = manifest
        .classes
        .iter()
        .flat_map(|c| c.files.iter().map(|f| (c.label.clone(), base.join(f))))
        .collect();
    let sequences = jobs
        .par_iter()
        .map(|(label, path)| -> AppResult<Sequence> {
            let values = read_sequence_csv(path, manifest.feature_count)?;
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let seq = Sequence::new(values, label.clone(), id, manifest.dt).map_err(|e| AppError::data(path, e.to_string()))?;
            resample(&seq, manifest.target_length).map_err(|e| AppError::data(path, e.to_string()))
        })
        .collect::<AppResult<Vec<_>>>()?;
    let labels = manifest.classes.iter().map(|c| c.label.clone()).collect();
    Dataset::new(manifest.dataset_name.clone(), sequences, labels).map_err(|e| AppError::data(manifest_path, e.to_string()))
}

/// Writes a dataset as `manifest.toml` plus one CSV per sequence under
/// `dir/data`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path, unit: &str) -> AppResult<PathBuf> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| AppError::io(&data_dir, e))?;
    let mut classes: Vec<ManifestClass> = dataset
        .classes
        .iter()
        .map(|l| ManifestClass {
            label: l.clone(),
            files: Vec::new(),
        })
        .collect();
    for (k, s) in dataset.sequences.iter().enumerate() {
        let name = format!("{}.csv", s.source_id);
        write_sequence_csv(&data_dir.join(&name), &s.values)?;
        classes[dataset.class_of(k)].files.push(format!("data/{name}"));
    }
    let manifest = Manifest {
        dataset_name: dataset.name.clone(),
        feature_count: dataset.dim,
        target_length: dataset.length,
        dt: dataset.sequences[0].dt,
        unit: unit.to_string(),
        classes,
    };
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}
