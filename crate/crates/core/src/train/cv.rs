use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predict, train, trial_vote, EpochLog, MetricsReport, PreparedDataset, TrainConfig, TrainError};
use crate::data::{patient_folds, split_validation};
use crate::diffcore::Scalar;
use crate::losses::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 3, repeats: 10, jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
    /// Majority vote over each trial's windows.
    pub trial_metrics: MetricsReport,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single entry.
    pub std: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub entries: Vec<CvEntry>,
    pub acc: MetricSummary,
    pub bca: MetricSummary,
    pub weighted_f1: MetricSummary,
    pub trial_bca: MetricSummary,
}

impl CvResult {
    pub fn from_entries(entries: Vec<CvEntry>) -> Self {
        let col = |f: fn(&CvEntry) -> f64| MetricSummary::of(&entries.iter().map(f).collect::<Vec<_>>());
        Self {
            acc: col(|e| e.metrics.acc),
            bca: col(|e| e.metrics.bca),
            weighted_f1: col(|e| e.metrics.weighted_f1),
            trial_bca: col(|e| e.trial_metrics.bca),
            entries,
        }
    }
}

fn disjoint(a: &[String], b: &[String]) -> Result<(), TrainError> {
    let set: BTreeSet<&String> = a.iter().collect();
    match b.iter().find(|p| set.contains(p)) {
        Some(p) => Err(TrainError::Leak(p.clone())),
        None => Ok(()),
    }
}

struct Job {
    repeat: usize,
    fold: usize,
    seed: u64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn run_job<F: Scalar>(data: &PreparedDataset, cfg: &TrainConfig, job: &Job) -> Result<CvEntry, TrainError> {
    let train_w = data.select(&job.train);
    let val_w = data.select(&job.val);
    let test_w = data.select(&job.test);
    // audit at window level as well as patient level
    let test_ids: BTreeSet<&str> = test_w.iter().map(|s| s.patient_id.as_str()).collect();
    if let Some(s) = train_w.iter().chain(&val_w).find(|s| test_ids.contains(s.patient_id.as_str())) {
        return Err(TrainError::Leak(s.patient_id.clone()));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.seed = job.seed;
    let out = train::<F>(&train_w, &val_w, &run_cfg)?;
    let logits = predict(&out.model, &test_w, run_cfg.batch_size)?;
    let preds: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let labels: Vec<usize> = test_w.iter().map(|s| s.label).collect();
    let k = run_cfg.model.num_classes;
    let metrics = MetricsReport::from_predictions(&labels, &preds, k)?;
    let ids: Vec<&str> = test_w.iter().map(|s| s.trial_id.as_str()).collect();
    let trial_metrics = trial_vote(&ids, &labels, &preds, k)?;
    Ok(CvEntry {
        repeat: job.repeat,
        fold: job.fold,
        seed: job.seed,
        metrics,
        trial_metrics,
        epochs: out.log.len(),
        best_epoch: out.best_epoch,
        train_patients: job.train.clone(),
        val_patients: job.val.clone(),
        test_patients: job.test.clone(),
        log: out.log,
    })
}

/// Cross-patient k-fold validation, repeated with fresh fold assignments.
/// Run `(r, f)` trains with seed `cfg.seed + 1000 r + f`; the model shape is
/// taken from the data.
pub fn cross_validate<F: Scalar>(data: &PreparedDataset, cfg: &TrainConfig, cv: &CvConfig) -> Result<CvResult, TrainError> {
    let cfg = cfg.fitted_to(data);
    cfg.validate()?;
    if cv.repeats == 0 {
        return Err(TrainError::Invalid("repeats must be positive".into()));
    }
    let patients = data.patients();
    let mut jobs = Vec::new();
    for r in 0..cv.repeats {
        let plan_seed = cfg.seed.wrapping_add(1000 * r as u64);
        let plan = patient_folds(patients.iter().map(String::as_str), cv.folds, plan_seed)?;
        for f in 0..cv.folds {
            let seed = plan_seed.wrapping_add(f as u64);
            let test = plan.patients_in(f);
            let outside = plan.patients_outside(f);
            let (train, val) = if cv.folds == 1 { (Vec::new(), Vec::new()) } else { split_validation(&outside, cfg.val_fraction, seed) };
            disjoint(&train, &test)?;
            disjoint(&val, &test)?;
            disjoint(&train, &val)?;
            jobs.push(Job { repeat: r, fold: f, seed, train, val, test });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cv.jobs).build().map_err(|e| TrainError::Invalid(e.to_string()))?;
    let entries = pool.install(|| jobs.par_iter().map(|j| run_job::<F>(data, &cfg, j)).collect::<Result<Vec<_>, _>>())?;
    Ok(CvResult::from_entries(entries))
}
