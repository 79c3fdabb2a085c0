use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Cached;
use super::{AdamW, MetricsReport, TrainConfig, TrainError, WindowSample};
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::losses::{cross_entropy_graph, distill_graph, importance_loss_with_grad, total_loss, LossBreakdown};
use crate::model::{EnsembleMode, ForwardVars, MbmdModel};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_distill: f64,
    pub l_norm: f64,
    pub l_imp: Option<f64>,
    pub total: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_bca: Option<f64>,
    pub val_f1: Option<f64>,
}

pub struct TrainOutcome<F: Scalar> {
    /// Parameters from the epoch with the lowest monitored loss.
    pub model: MbmdModel<F>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

struct Terms {
    objective: Var,
    ce: Var,
    distill: Option<Var>,
    norm: Option<Var>,
}

fn loss_terms<F: Scalar>(g: &mut Graph<F>, vars: &ForwardVars, labels: &[usize], cfg: &TrainConfig) -> Result<Terms, TrainError> {
    let mut ce = cross_entropy_graph(g, vars.z_data, labels)?;
    if cfg.distill.branch_ce && !vars.z_branch.is_empty() {
        let mut acc: Option<Var> = None;
        for &zb in &vars.z_branch {
            let term = cross_entropy_graph(g, zb, labels)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let mean = g.scale(acc.expect("at least one branch"), F::lit(1.0 / vars.z_branch.len() as f64))?;
        ce = g.add(ce, mean)?;
    }
    if let Some(zc) = vars.concat_logits {
        let term = cross_entropy_graph(g, zc, labels)?;
        ce = g.add(ce, term)?;
    }
    let distill = distill_graph(g, vars.z_data, &vars.z_branch, cfg.distill.temperature, cfg.distill.mode)?;
    let norm = match vars.wavelet_w {
        Some(w) => Some(g.l1_norm(w)?),
        None => None,
    };
    let mut objective = ce;
    if let Some(d) = distill {
        objective = g.add(objective, d)?;
    }
    if let Some(n) = norm {
        if cfg.distill.lambda != 0.0 {
            let s = g.scale(n, F::lit(cfg.distill.lambda))?;
            objective = g.add(objective, s)?;
        }
    }
    Ok(Terms { objective, ce, distill, norm })
}

/// Differentiable training objective over forward outputs, excluding the
/// importance term (which enters as a seed gradient on the gate output).
pub(crate) fn objective<F: Scalar>(g: &mut Graph<F>, vars: &ForwardVars, labels: &[usize], cfg: &TrainConfig) -> Result<Var, TrainError> {
    Ok(loss_terms(g, vars, labels, cfg)?.objective)
}

/// Loss of one batch appended to `g`. Returns the differentiable objective,
/// the reported breakdown, the forward handles, and the seed gradient for
/// the gate output when the importance term is active.
#[allow(clippy::type_complexity)]
pub fn batch_loss<F: Scalar>(
    model: &MbmdModel<F>,
    g: &mut Graph<F>,
    raw: &[&Tensor<F>],
    bands: &[Vec<&Tensor<F>>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown, ForwardVars, Option<Tensor<F>>), TrainError> {
    let vars = model.forward_train(g, raw, bands)?;
    let terms = loss_terms(g, &vars, labels, cfg)?;
    let scalar = |g: &Graph<F>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let mut imp = None;
    let mut gate_seed = None;
    if let (Some(gate), EnsembleMode::GateNetwork) = (vars.gate, model.config().ensemble_mode) {
        let gt = g.value(gate);
        let rows: Vec<Vec<f64>> = (0..gt.rows()).map(|r| gt.row_slice(r).iter().map(|v| v.as_f64()).collect()).collect();
        let (value, grad) = importance_loss_with_grad(&rows)?;
        imp = Some((value, cfg.gate_importance_weight));
        if cfg.gate_importance_weight != 0.0 {
            let w = cfg.gate_importance_weight;
            let data = grad.iter().flatten().map(|v| F::lit(w * v)).collect();
            gate_seed = Some(Tensor::matrix(gt.rows(), gt.cols(), data)?);
        }
    }
    let breakdown = total_loss(scalar(g, Some(terms.ce)), scalar(g, terms.distill), scalar(g, terms.norm), imp, &cfg.distill);
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite("training loss".into()));
    }
    Ok((terms.objective, breakdown, vars, gate_seed))
}

fn batches(n: usize, size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    debug_assert_eq!(order.len(), n);
    order.chunks(size).map(|c| c.to_vec()).collect()
}

struct Monitor {
    loss: f64,
    metrics: Option<MetricsReport>,
}

/// Eval-mode loss and raw-path metrics over a window set.
fn monitor<F: Scalar>(model: &MbmdModel<F>, data: &Cached<F>, cfg: &TrainConfig) -> Result<Monitor, TrainError> {
    let mut weighted = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    for idx in batches(data.len(), cfg.batch_size, &(0..data.len()).collect::<Vec<_>>()) {
        let mut g = Graph::new();
        let raw: Vec<&Tensor<F>> = idx.iter().map(|&i| &data.raw[i]).collect();
        let bands: Vec<Vec<&Tensor<F>>> = idx.iter().map(|&i| data.bands[i].iter().collect()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let (_, b, vars, _) = batch_loss(model, &mut g, &raw, &bands, &labels, cfg)?;
        weighted += b.total * idx.len() as f64;
        let z = g.value(vars.z_data);
        preds.extend((0..z.rows()).map(|r| argmax_row(z.row_slice(r))));
    }
    let metrics = MetricsReport::from_predictions(&data.labels, &preds, model.config().num_classes).ok();
    Ok(Monitor { loss: weighted / data.len() as f64, metrics })
}

fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains from a fresh initialisation seeded by `cfg.seed`. Early stopping
/// monitors the validation total loss, or the training loss when `val` is
/// empty.
pub fn train<F: Scalar>(train: &[&WindowSample], val: &[&WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome<F>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let k = cfg.model.num_classes;
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= k) {
        return Err(TrainError::ClassCount { model: k, data: s.label + 1 });
    }
    let need_bands = cfg.model.branches() > 0;
    if need_bands {
        if let Some(s) = train.iter().chain(val).find(|s| s.bands.len() != cfg.model.branches()) {
            return Err(TrainError::MissingBands(s.trial_id.clone()));
        }
    }
    let tr = Cached::<F>::new(train, need_bands)?;
    let va = Cached::<F>::new(val, need_bands)?;

    let mut model = MbmdModel::<F>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(model.params().tensors(), cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1_e995);
    let mut order: Vec<usize> = (0..tr.len()).collect();

    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params().tensors().to_vec());
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut sums = LossBreakdown::default();
        let mut imp_sum: Option<f64> = None;
        for idx in batches(tr.len(), cfg.batch_size, &order) {
            let step_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(opt.steps());
            let mut g = Graph::training(step_seed);
            let raw: Vec<&Tensor<F>> = idx.iter().map(|&i| &tr.raw[i]).collect();
            let bands: Vec<Vec<&Tensor<F>>> = idx.iter().map(|&i| tr.bands[i].iter().collect()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| tr.labels[i]).collect();
            let (objective, b, vars, gate_seed) = batch_loss(&model, &mut g, &raw, &bands, &labels, cfg)?;
            let mut seeds = vec![(objective, Tensor::full(&[1, 1], F::one()))];
            if let (Some(gate), Some(seed)) = (vars.gate, gate_seed) {
                seeds.push((gate, seed));
            }
            let grads = g.backward_seeded(&seeds)?;
            let slots: Vec<Option<&Tensor<F>>> = vars.params.iter().map(|&p| grads.get(p)).collect();
            opt.step(model.params_mut().tensors_mut(), &slots);

            let w = idx.len() as f64;
            sums.l_ce += w * b.l_ce;
            sums.l_distill += w * b.l_distill;
            sums.l_norm += w * b.l_norm;
            sums.total += w * b.total;
            if let Some(v) = b.l_imp {
                *imp_sum.get_or_insert(0.0) += w * v;
            }
        }
        if !model.params().all_finite() {
            return Err(TrainError::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let n = tr.len() as f64;
        let mut row = EpochLog {
            epoch,
            l_ce: sums.l_ce / n,
            l_distill: sums.l_distill / n,
            l_norm: sums.l_norm / n,
            l_imp: imp_sum.map(|v| v / n),
            total: sums.total / n,
            val_loss: None,
            val_acc: None,
            val_bca: None,
            val_f1: None,
        };
        let monitored = if va.len() > 0 {
            let m = monitor(&model, &va, cfg)?;
            row.val_loss = Some(m.loss);
            if let Some(r) = &m.metrics {
                row.val_acc = Some(r.acc);
                row.val_bca = Some(r.bca);
                row.val_f1 = Some(r.weighted_f1);
            }
            m.loss
        } else {
            row.total
        };
        log.push(row);
        if monitored < best.0 {
            best = (monitored, epoch, model.params().tensors().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_loss, best_epoch, tensors) = best;
    model.params_mut().tensors_mut().clone_from_slice(&tensors);
    Ok(TrainOutcome { model, log, best_epoch, best_loss })
}

/// Raw-path logits for every window.
pub fn predict<F: Scalar>(model: &MbmdModel<F>, windows: &[&WindowSample], batch_size: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let raw: Vec<Tensor<F>> = chunk.iter().map(|s| s.raw.cast()).collect();
        let refs: Vec<&Tensor<F>> = raw.iter().collect();
        let z = model.forward_infer(&refs)?;
        out.extend((0..z.rows()).map(|r| z.row_slice(r).iter().map(|v| v.as_f64()).collect::<Vec<f64>>()));
    }
    Ok(out)
}

/// Window-level metrics from raw-only inference.
pub fn evaluate<F: Scalar>(model: &MbmdModel<F>, windows: &[&WindowSample]) -> Result<MetricsReport, TrainError> {
    let k = model.config().num_classes;
    if let Some(s) = windows.iter().find(|s| s.label >= k) {
        return Err(TrainError::ClassCount { model: k, data: s.label + 1 });
    }
    let logits = predict(model, windows, 64)?;
    let preds: Vec<usize> = logits.iter().map(|z| crate::losses::argmax(z)).collect();
    let labels: Vec<usize> = windows.iter().map(|s| s.label).collect();
    MetricsReport::from_predictions(&labels, &preds, k)
}
