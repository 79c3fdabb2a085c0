//! EEG trials: file IO, preprocessing, windowing, patient folds and the
//! synthetic band-coded corpus.

mod filter;
mod io;
mod preprocess;
mod segment;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

pub use filter::{Biquad, Butterworth};
pub use io::{
    load_dataset, read_manifest, read_trial_file, write_manifest, write_trial_binary, write_trial_csv, ManifestEntry, ManifestLabel,
    TRIAL_MAGIC, TRIAL_VERSION,
};
pub use preprocess::{detrend, preprocess_trial, resample, PreprocessConfig, TARGET_RATE_HZ};
pub use segment::{patient_folds, segment, split_validation, FoldPlan};
pub use synth::{synth_dataset, write_synth_dataset, SynthConfig, SYNTH_BANDS};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: file not found")]
    MissingFile(PathBuf),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{path}: declared {expected} channels, found {got}")]
    ShapeMismatch { path: PathBuf, expected: usize, got: usize },
    #[error("trial {entry}: unknown label {label}")]
    UnknownLabel { entry: usize, label: String },
    #[error("manifest format version {0} is not supported")]
    Version(u32),
    #[error("sample rate {0} Hz is below the 128 Hz target")]
    UnsupportedRate(f64),
    #[error("{patients} patients cannot fill {k} folds")]
    InfeasibleFolds { patients: usize, k: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub names: Vec<String>,
}

impl ClassSpec {
    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        let spec = Self { names };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.names.len() < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {}", self.names.len())));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(DataError::Invalid(format!("duplicate class name {dup:?}")));
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A dataset description: class set plus one entry per trial file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub classes: Vec<String>,
    /// Declared channel count; every trial file must match it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    pub trials: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn class_spec(&self) -> Result<ClassSpec, DataError> {
        ClassSpec::new(self.classes.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EegTrial {
    pub id: String,
    pub patient_id: String,
    pub label: usize,
    pub sample_rate_hz: f64,
    /// `C x L_total`.
    pub samples: Tensor<f64>,
    pub channel_names: Vec<String>,
}

impl EegTrial {
    pub fn channels(&self) -> usize {
        self.samples.rows()
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.samples.row_slice(c)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.shape().len() != 2 || self.channels() == 0 || self.is_empty() {
            return Err(DataError::Invalid(format!("trial {}: empty sample matrix", self.id)));
        }
        if !self.samples.is_finite() {
            return Err(DataError::Invalid(format!("trial {}: non-finite samples", self.id)));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(DataError::Invalid(format!("trial {}: sample rate {}", self.id, self.sample_rate_hz)));
        }
        if self.channel_names.len() != self.channels() {
            return Err(DataError::Invalid(format!(
                "trial {}: {} channel names for {} channels",
                self.id,
                self.channel_names.len(),
                self.channels()
            )));
        }
        Ok(())
    }
}

pub fn default_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EegWindow {
    pub patient_id: String,
    pub label: usize,
    pub sample_rate_hz: f64,
    /// `C x L`.
    pub samples: Tensor<f64>,
    pub channel_names: Vec<String>,
    pub parent_trial_id: String,
    pub offset_samples: usize,
}

impl EegWindow {
    pub fn id(&self) -> String {
        format!("{}@{}", self.parent_trial_id, self.offset_samples)
    }
}
