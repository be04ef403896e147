//! Parametric periodic motions for testing and desk-scale experiments.

use gpdmm_core::{Dataset, Sequence};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub label: String,
    /// Cycles of the base frequency over one sequence.
    pub cycles: f64,
    /// Relative weight of each harmonic, starting with the fundamental.
    pub harmonics: Vec<f64>,
    /// Seeds the per-feature amplitudes, phases and offsets. Classes that
    /// share a shape seed move the same joints the same way.
    pub shape_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub features: usize,
    pub length: usize,
    pub trials: usize,
    pub dt: f64,
    /// Standard deviation of additive observation noise.
    pub noise: f64,
    /// Half-width of the uniform per-trial phase offset, in radians.
    pub phase_jitter: f64,
    /// Fraction of the sequence over which the phase offset eases in, so
    /// every trial starts from the same pose. Zero applies it from the start.
    pub phase_ramp: f64,
    /// Half-width of the uniform per-trial relative amplitude change.
    pub amplitude_jitter: f64,
    pub classes: Vec<SynthClass>,
}

impl SynthSpec {
    /// Four classes with distinct base frequencies and joint patterns.
    pub fn separable(features: usize, length: usize, trials: usize) -> SynthSpec {
        let cycles = [2.0, 3.0, 4.0, 5.0];
        let harmonics = [vec![1.0, 0.3], vec![1.0, 0.0, 0.25], vec![1.0, 0.2], vec![1.0]];
        SynthSpec {
            name: "synthetic-separable".into(),
            features,
            length,
            trials,
            dt: 1.0 / 30.0,
            noise: 0.01,
            phase_jitter: 0.5,
            phase_ramp: 0.0,
            amplitude_jitter: 0.0,
            classes: (0..4)
                .map(|c| SynthClass {
                    label: format!("motion{c}"),
                    cycles: cycles[c],
                    harmonics: harmonics[c].clone(),
                    shape_seed: 101 + c as u64,
                })
                .collect(),
        }
    }

    /// Four classes sharing one joint pattern at nearby frequencies.
    pub fn overlapping(features: usize, length: usize, trials: usize) -> SynthSpec {
        let mut spec = SynthSpec::separable(features, length, trials);
        spec.name = "synthetic-overlapping".into();
        let cycles = [3.0, 3.25, 3.5, 3.75];
        for (c, class) in spec.classes.iter_mut().enumerate() {
            class.cycles = cycles[c];
            class.harmonics = vec![1.0, 0.1 * c as f64];
            class.shape_seed = 101;
        }
        spec
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: &str| Err(AppError::Config(format!("synthetic spec: {m}")));
        if self.classes.is_empty() {
            return bad("needs at least one class");
        }
        if self.features == 0 || self.length < 2 || self.trials == 0 {
            return bad("features, length and trials must be positive (length at least 2)");
        }
        if !(self.dt > 0.0) || self.noise < 0.0 || self.phase_jitter < 0.0 || !(0.0..1.0).contains(&self.amplitude_jitter) || !(0.0..=1.0).contains(&self.phase_ramp) {
            return bad("dt must be positive; noise and jitters nonnegative; amplitude jitter below 1; phase ramp within [0, 1]");
        }
        for c in &self.classes {
            if c.harmonics.is_empty() || !(c.cycles > 0.0) {
                return bad(&format!("class `{}` needs positive cycles and at least one harmonic", c.label));
            }
        }
        Ok(())
    }
}

struct Shape {
    offset: Vec<f64>,
    amplitude: Vec<f64>,
    phase: Vec<Vec<f64>>,
}

fn shape(seed: u64, class: &SynthClass, features: usize) -> Shape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class.shape_seed);
    let tau = std::f64::consts::TAU;
    let offset = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let amplitude = (0..features).map(|_| rng.random_range(0.5..1.5)).collect();
    let phase = (0..features)
        .map(|_| class.harmonics.iter().map(|_| rng.random_range(0.0..tau)).collect())
        .collect();
    Shape { offset, amplitude, phase }
}

/// Smoothstep from 0 at `u = 0` to 1 at `u = ramp`.
fn ease(u: f64, ramp: f64) -> f64 {
    if ramp <= 0.0 {
        return 1.0;
    }
    let v = (u / ramp).min(1.0);
    v * v * (3.0 - 2.0 * v)
}

/// Generates `trials` sequences per class, fully determined by `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> AppResult<Dataset> {
    spec.validate()?;
    let tau = std::f64::consts::TAU;
    let mut sequences = Vec::with_capacity(spec.classes.len() * spec.trials);
    for (ci, class) in spec.classes.iter().enumerate() {
        let sh = shape(seed, class, spec.features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64 + 1) << 32));
        let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| AppError::Config(e.to_string()))?;
        for trial in 0..spec.trials {
            let delta = if spec.phase_jitter > 0.0 { rng.random_range(-spec.phase_jitter..=spec.phase_jitter) } else { 0.0 };
            let scale = 1.0 + if spec.amplitude_jitter > 0.0 { rng.random_range(-spec.amplitude_jitter..=spec.amplitude_jitter) } else { 0.0 };
            let mut values = DMatrix::zeros(spec.length, spec.features);
            for t in 0..spec.length {
                let u = t as f64 / (spec.length - 1) as f64;
                let base = tau * class.cycles * u + delta * ease(u, spec.phase_ramp);
                for d in 0..spec.features {
                    let wave: f64 = class
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(h, w)| w * ((h + 1) as f64 * base + sh.phase[d][h]).sin())
                        .sum();
                    let eps = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    values[(t, d)] = sh.offset[d] + scale * sh.amplitude[d] * wave + eps;
                }
            }
            let id = format!("{}_{:02}", class.label, trial);
            sequences.push(Sequence::new(values, class.label.clone(), id, spec.dt)?);
        }
    }
    let labels = spec.classes.iter().map(|c| c.label.clone()).collect();
    Ok(Dataset::new(spec.name.clone(), sequences, labels)?)
}
