//! Optimisation loop, metrics, cross-patient validation and ablations.

mod ablation;
mod cv;
mod dataset;
mod fit;
mod gradcheck;
mod metrics;
mod optim;
mod report;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_suite, suite_variants, AblationRow, Suite, Variant};
pub use cv::{cross_validate, CvConfig, CvEntry, CvResult, MetricSummary};
pub use dataset::{DataConfig, PreparedDataset, WindowSample};
pub use fit::{batch_loss, evaluate, predict, train, EpochLog, TrainOutcome};
pub use gradcheck::{gradcheck_suite, model_gradcheck, GradcheckRow, GRADCHECK_TOLERANCE};
pub use metrics::{trial_vote, MetricsReport};
pub use optim::AdamW;
pub use report::{write_aggregate_csv, write_results_csv, write_training_log};

use crate::data::DataError;
use crate::diffcore::DiffError;
use crate::losses::{DistillConfig, LossError};
use crate::model::{ModelConfig, ModelError};
use crate::wpd::WpdError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("band signals missing for window {0}")]
    MissingBands(String),
    #[error("model has {model} classes but data has {data}")]
    ClassCount { model: usize, data: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("patient {0} appears on both sides of a split")]
    Leak(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wpd(#[from] WpdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fraction of training patients held out for early stopping.
    pub val_fraction: f64,
    pub gate_importance_weight: f64,
    pub distill: DistillConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            val_fraction: 0.2,
            gate_importance_weight: 0.01,
            distill: DistillConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(self.distill.temperature > 0.0) || !(self.distill.lambda >= 0.0) {
            return bad("temperature must be positive and lambda non-negative".into());
        }
        if !(self.gate_importance_weight >= 0.0) {
            return bad("gate_importance_weight must be non-negative".into());
        }
        self.model.validate()?;
        Ok(())
    }

    /// Copies the data-determined shape fields into the model config.
    pub fn fitted_to(&self, data: &PreparedDataset) -> Self {
        let mut cfg = self.clone();
        cfg.model.channels = data.channels();
        cfg.model.window_len = data.window_len();
        cfg.model.num_classes = data.classes.len();
        cfg.model.num_branches = data.num_branches();
        cfg
    }
}

#[cfg(test)]
mod tests;
