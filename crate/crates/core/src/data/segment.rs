use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, EegTrial, EegWindow, TARGET_RATE_HZ};
use crate::diffcore::Tensor;

/// Sliding windows over a 128 Hz trial. Trials shorter than one window
/// yield no windows.
pub fn segment(trial: &EegTrial, window_seconds: f64, overlap_fraction: f64) -> Result<Vec<EegWindow>, DataError> {
    if (trial.sample_rate_hz - TARGET_RATE_HZ).abs() > 1e-9 {
        return Err(DataError::UnsupportedRate(trial.sample_rate_hz));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(DataError::Invalid(format!("overlap {overlap_fraction} outside [0, 1)")));
    }
    let len = (window_seconds * TARGET_RATE_HZ).round() as usize;
    if len == 0 {
        return Err(DataError::Invalid(format!("window of {window_seconds} s has no samples")));
    }
    let hop = ((len as f64) * (1.0 - overlap_fraction)).round().max(1.0) as usize;
    let total = trial.len();
    if total < len {
        return Ok(Vec::new());
    }
    let c = trial.channels();
    let mut out = Vec::new();
    let mut offset = 0;
    while offset + len <= total {
        let mut data = Vec::with_capacity(c * len);
        for ch in 0..c {
            data.extend_from_slice(&trial.channel(ch)[offset..offset + len]);
        }
        out.push(EegWindow {
            patient_id: trial.patient_id.clone(),
            label: trial.label,
            sample_rate_hz: trial.sample_rate_hz,
            samples: Tensor::matrix(c, len, data).map_err(|e| DataError::Invalid(e.to_string()))?,
            channel_names: trial.channel_names.clone(),
            parent_trial_id: trial.id.clone(),
            offset_samples: offset,
        });
        offset += hop;
    }
    Ok(out)
}

/// Patient-disjoint fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignments.get(patient).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(p, _)| p.clone()).collect()
    }

    pub fn patients_outside(&self, fold: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f != fold).map(|(p, _)| p.clone()).collect()
    }
}

/// Shuffles the distinct patient ids with `seed` and deals them round-robin
/// into `k` folds.
pub fn patient_folds<'a>(patients: impl IntoIterator<Item = &'a str>, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    let unique: BTreeSet<&str> = patients.into_iter().collect();
    if k == 0 || unique.len() < k {
        return Err(DataError::InfeasibleFolds { patients: unique.len(), k });
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = ids.iter().enumerate().map(|(i, p)| (p.to_string(), i % k)).collect();
    Ok(FoldPlan { k, seed, assignments })
}

/// Holds out `fraction` of the patients (at least one when two or more are
/// available) for validation. Returns `(train, validation)` patient lists.
pub fn split_validation(patients: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = patients.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 || fraction <= 0.0 {
        return (ids, Vec::new());
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let val = ids.split_off(ids.len() - n_val);
    ids.sort();
    let mut val = val;
    val.sort();
    (ids, val)
}
