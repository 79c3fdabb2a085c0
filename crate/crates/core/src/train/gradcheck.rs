use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fit::objective;
use super::{TrainConfig, TrainError};
use crate::diffcore::{check_fn, finite_diff_check, standard_cases, DiffError, GradCheck, Tensor};
use crate::model::{EnsembleMode, MbmdModel, ModelConfig, StreamBatch};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random_window(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid std");
    let data = (0..cfg.channels * cfg.window_len).map(|_| n.sample(rng)).collect();
    Tensor::matrix(cfg.channels, cfg.window_len, data).expect("shape")
}

/// Finite-difference check of the full training objective (cross-entropy on
/// every head, distillation and the sparsity term) with respect to every
/// parameter of a model built from `train.model`. Parameters are jittered
/// away from initialisation so that no value sits on the `|w|` kink.
pub fn model_gradcheck(train: &TrainConfig, seed: u64) -> Result<GradCheck, TrainError> {
    let cfg = &train.model;
    let mut model = MbmdModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let jitter = Normal::new(0.0, 0.3).expect("valid std");
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let batch = 3;
    let raw: Vec<Tensor<f64>> = (0..batch).map(|_| random_window(cfg, &mut rng)).collect();
    let bands: Vec<Vec<Tensor<f64>>> = (0..batch).map(|_| (0..cfg.branches()).map(|_| random_window(cfg, &mut rng)).collect()).collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let raw_refs: Vec<&Tensor<f64>> = raw.iter().collect();
    let band_refs: Vec<Vec<&Tensor<f64>>> = bands.iter().map(|s| s.iter().collect()).collect();
    let inputs = model.params().tensors().to_vec();
    let graph_seed = (cfg.dropout > 0.0).then_some(seed);
    let res = check_fn(&inputs, EPS, graph_seed, |g, vars| {
        let batch = StreamBatch { raw: raw_refs.clone(), bands: Some(band_refs.clone()) };
        let contract = |e: &dyn std::fmt::Display| DiffError::Contract(e.to_string());
        let out = model.forward_with_params(g, &batch, vars.to_vec()).map_err(|e| contract(&e))?;
        objective(g, &out, &labels, train).map_err(|e| contract(&e))
    })?;
    Ok(res)
}

/// Every diffcore op on its standard cases plus the full model objective in
/// wavelet-attention and gate-network modes.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckRow>, TrainError> {
    let mut rows = Vec::new();
    for (op, shapes) in standard_cases() {
        let err = finite_diff_check(op, &shapes, EPS, seed)?;
        let dims: Vec<String> = shapes.iter().map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")).collect();
        rows.push(GradcheckRow { name: format!("{op}[{}]", dims.join(";")), max_rel_err: err, passed: err < GRADCHECK_TOLERANCE });
    }
    for mode in [EnsembleMode::WaveletAttention, EnsembleMode::GateNetwork] {
        let cfg =
            TrainConfig { model: ModelConfig { ensemble_mode: mode, dropout: 0.1, ..ModelConfig::micro() }, ..TrainConfig::default() };
        let res = model_gradcheck(&cfg, seed)?;
        rows.push(GradcheckRow {
            name: format!("model_loss[{}]", serde_json::to_value(mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
            max_rel_err: res.max_rel_err,
            passed: res.max_rel_err < GRADCHECK_TOLERANCE,
        });
    }
    Ok(rows)
}
