use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{preprocess_trial, segment, EegTrial, PreprocessConfig};
use crate::diffcore::{Scalar, Tensor};
use crate::wpd::{band_grouping_preset, decompose_matrix, BandGrouping};

/// Everything between a loaded trial and a model-ready window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preprocess: PreprocessConfig,
    pub window_seconds: f64,
    pub overlap: f64,
    /// Band preset: 2, 3 or 6 branches.
    pub branches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { preprocess: PreprocessConfig::default(), window_seconds: 4.0, overlap: 0.5, branches: 6 }
    }
}

/// One window with its cached band signals.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub raw: Tensor<f64>,
    pub bands: Vec<Tensor<f64>>,
    pub label: usize,
    pub patient_id: String,
    pub trial_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub classes: Vec<String>,
    pub grouping: BandGrouping,
    pub samples: Vec<WindowSample>,
}

impl PreparedDataset {
    pub fn from_trials(classes: Vec<String>, trials: &[EegTrial], cfg: &DataConfig) -> Result<Self, TrainError> {
        let grouping = band_grouping_preset(cfg.branches)?;
        let per_trial: Vec<Vec<WindowSample>> = trials
            .par_iter()
            .map(|t| -> Result<Vec<WindowSample>, TrainError> {
                let clean = preprocess_trial(t, &cfg.preprocess)?;
                segment(&clean, cfg.window_seconds, cfg.overlap)?
                    .into_iter()
                    .map(|w| {
                        let bands = decompose_matrix(&w.samples, &grouping)?;
                        Ok(WindowSample { raw: w.samples, bands, label: w.label, patient_id: w.patient_id, trial_id: w.parent_trial_id })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        let samples: Vec<WindowSample> = per_trial.into_iter().flatten().collect();
        if samples.is_empty() {
            return Err(TrainError::Invalid("no windows: every trial is shorter than one window".into()));
        }
        let shape = samples[0].raw.shape().to_vec();
        if let Some(bad) = samples.iter().find(|s| s.raw.shape() != shape.as_slice()) {
            return Err(TrainError::Invalid(format!("window {} has shape {:?}, expected {shape:?}", bad.trial_id, bad.raw.shape())));
        }
        if let Some(bad) = samples.iter().find(|s| s.label >= classes.len()) {
            return Err(TrainError::ClassCount { model: classes.len(), data: bad.label + 1 });
        }
        Ok(Self { classes, grouping, samples })
    }

    /// Same windows, band signals recomputed for another grouping.
    pub fn regroup(&self, grouping: BandGrouping) -> Result<Self, TrainError> {
        let samples = self
            .samples
            .par_iter()
            .map(|s| Ok(WindowSample { bands: decompose_matrix(&s.raw, &grouping)?, ..s.clone() }))
            .collect::<Result<_, TrainError>>()?;
        Ok(Self { classes: self.classes.clone(), grouping, samples })
    }

    pub fn patients(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.raw.rows())
    }

    pub fn window_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.raw.cols())
    }

    pub fn num_branches(&self) -> usize {
        self.grouping.num_branches()
    }

    /// Windows whose patient is in `patients`, in dataset order.
    pub fn select(&self, patients: &[String]) -> Vec<&WindowSample> {
        let set: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
        self.samples.iter().filter(|s| set.contains(s.patient_id.as_str())).collect()
    }
}

/// Windows converted once to the training precision.
pub(crate) struct Cached<F: Scalar> {
    pub raw: Vec<Tensor<F>>,
    pub bands: Vec<Vec<Tensor<F>>>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Cached<F> {
    pub fn new(samples: &[&WindowSample], need_bands: bool) -> Result<Self, TrainError> {
        let mut bands = Vec::with_capacity(samples.len());
        for s in samples {
            if need_bands && s.bands.is_empty() {
                return Err(TrainError::MissingBands(s.trial_id.clone()));
            }
            bands.push(if need_bands { s.bands.iter().map(|b| b.cast()).collect() } else { Vec::new() });
        }
        Ok(Self { raw: samples.iter().map(|s| s.raw.cast()).collect(), bands, labels: samples.iter().map(|s| s.label).collect() })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }
}
