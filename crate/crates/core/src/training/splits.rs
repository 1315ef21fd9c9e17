use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::FOLD_COUNT;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fit_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

/// Patient-wise split: a third held out for testing, the rest cut into
/// five validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub folds: Vec<Fold>,
}

pub const MIN_PATIENTS: usize = 15;

pub fn make_splits(patient_ids: &[u64], seed: u64) -> Result<SplitPlan> {
    if patient_ids.len() < MIN_PATIENTS {
        return Err(Error::config(format!(
            "splitting needs at least {MIN_PATIENTS} patients, got {}",
            patient_ids.len()
        )));
    }
    let mut sorted = patient_ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("patient ids must be unique"));
    }
    let mut order = patient_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = order.len() / 3;
    let test_ids = order[..n_test].to_vec();
    let train_ids = order[n_test..].to_vec();
    let n = train_ids.len();
    let folds = (0..FOLD_COUNT)
        .map(|k| {
            let (lo, hi) = (k * n / FOLD_COUNT, (k + 1) * n / FOLD_COUNT);
            Fold {
                val_ids: train_ids[lo..hi].to_vec(),
                fit_ids: train_ids[..lo].iter().chain(&train_ids[hi..]).copied().collect(),
            }
        })
        .collect();
    Ok(SplitPlan {
        train_ids,
        test_ids,
        folds,
    })
}
