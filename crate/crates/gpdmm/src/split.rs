//! Monte Carlo cross-validation splits with one training sequence per class.

use gpdmm_core::Dataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Sequence indices into a dataset. `train` holds one index per class in
/// class order; `validation` and `test` are grouped by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn mccv_split(dataset: &Dataset, seed: u64, n_validation: usize, n_test: usize) -> AppResult<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (c, label) in dataset.classes.iter().enumerate() {
        let mut members: Vec<usize> = (0..dataset.sequences.len()).filter(|&k| dataset.class_of(k) == c).collect();
        if members.len() < 1 + n_validation + n_test {
            return Err(AppError::Config(format!(
                "class `{label}` has {} sequences; a split needs 1 training + {n_validation} validation + {n_test} test",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        split.train.push(members[0]);
        let mut val = members[1..1 + n_validation].to_vec();
        let mut test = members[1 + n_validation..1 + n_validation + n_test].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        split.validation.extend(val);
        split.test.extend(test);
    }
    Ok(split)
}
