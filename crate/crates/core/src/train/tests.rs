use super::*;
use crate::data::{synth_dataset, SynthConfig};
use crate::model::{EnsembleMode, ModelConfig};

fn tiny_data(patients: usize, trials: usize) -> PreparedDataset {
    let (m, t) = synth_dataset(&SynthConfig {
        num_patients: patients,
        trials_per_patient: trials,
        num_classes: 2,
        trial_seconds: 1.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = DataConfig { window_seconds: 0.5, branches: 2, ..DataConfig::default() };
    PreparedDataset::from_trials(m.classes, &t, &cfg).unwrap()
}

fn tiny_cfg(data: &PreparedDataset) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 4,
        patience: 2,
        model: ModelConfig { patch_size: 16, ..ModelConfig::micro() },
        ..TrainConfig::default()
    }
    .fitted_to(data)
}

#[test]
fn prepared_windows_carry_bands() {
    let d = tiny_data(2, 2);
    // 1 s trials, 0.5 s windows, 50% overlap -> 3 windows each
    assert_eq!(d.samples.len(), 2 * 2 * 3);
    assert_eq!(d.window_len(), 64);
    for s in &d.samples {
        assert_eq!(s.bands.len(), 2);
        assert!(s.bands.iter().all(|b| b.shape() == s.raw.shape()));
    }
    let three = d.regroup(crate::wpd::band_grouping_preset(3).unwrap()).unwrap();
    assert_eq!(three.num_branches(), 3);
    assert_eq!(three.samples[0].raw, d.samples[0].raw);
}

#[test]
fn zero_learning_rate_keeps_initialisation() {
    let d = tiny_data(2, 2);
    let mut cfg = tiny_cfg(&d);
    cfg.learning_rate = 0.0;
    cfg.weight_decay = 0.0;
    let all: Vec<_> = d.samples.iter().collect();
    let out = train::<f64>(&all, &[], &cfg).unwrap();
    let fresh = crate::model::MbmdModel::<f64>::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(out.model.params().tensors(), fresh.params().tensors());
}

#[test]
fn fixed_seed_reproduces_first_epoch() {
    let d = tiny_data(2, 2);
    let cfg = tiny_cfg(&d);
    let all: Vec<_> = d.samples.iter().collect();
    let a = train::<f32>(&all, &[], &cfg).unwrap();
    let b = train::<f32>(&all, &[], &cfg).unwrap();
    assert_eq!(a.log[0].total.to_bits(), b.log[0].total.to_bits());
    assert_eq!(a.log, b.log);
}

#[test]
fn memorises_a_single_window() {
    let d = tiny_data(1, 1);
    let mut cfg = tiny_cfg(&d);
    cfg.max_epochs = 300;
    cfg.patience = 300;
    cfg.learning_rate = 3e-3;
    cfg.model.dropout = 0.0;
    let one = vec![&d.samples[0]];
    let out = train::<f32>(&one, &[], &cfg).unwrap();
    let last = out.log.last().unwrap();
    let raw_ce = crate::losses::cross_entropy(&predict(&out.model, &one, 1).unwrap()[0], d.samples[0].label).unwrap();
    assert!(raw_ce < 0.05, "ce {raw_ce}, last epoch {last:?}");
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let d = tiny_data(4, 2);
    let mut cfg = tiny_cfg(&d);
    cfg.max_epochs = 12;
    cfg.patience = 3;
    let pats = d.patients();
    let (tr, va) = (d.select(&pats[..3]), d.select(&pats[3..]));
    let out = train::<f64>(&tr, &va, &cfg).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.val_loss.unwrap()).collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_loss, min);
    assert_eq!(losses[out.best_epoch - 1], min);
    // the returned parameters reproduce the recorded validation loss
    let mut g = crate::diffcore::Graph::new();
    let raw: Vec<_> = va.iter().map(|s| &s.raw).collect();
    let bands: Vec<Vec<_>> = va.iter().map(|s| s.bands.iter().collect()).collect();
    let labels: Vec<usize> = va.iter().map(|s| s.label).collect();
    let (_, b, _, _) = batch_loss(&out.model, &mut g, &raw, &bands, &labels, &cfg).unwrap();
    assert!((b.total - min).abs() < 1e-12, "{} vs {min}", b.total);
    assert!(out.log.len() < cfg.max_epochs || out.best_epoch + cfg.patience > cfg.max_epochs);
}

#[test]
fn training_rejects_bad_inputs() {
    let d = tiny_data(2, 1);
    let cfg = tiny_cfg(&d);
    assert!(matches!(train::<f32>(&[], &[], &cfg), Err(TrainError::EmptyTrainingSet)));
    let mut no_bands = d.samples[0].clone();
    no_bands.bands.clear();
    assert!(matches!(train::<f32>(&[&no_bands], &[], &cfg), Err(TrainError::MissingBands(_))));
    let mut bad = d.samples[0].clone();
    bad.label = 7;
    assert!(matches!(train::<f32>(&[&bad], &[], &cfg), Err(TrainError::ClassCount { .. })));
}

#[test]
fn every_mode_trains_and_logs_its_terms() {
    let d = tiny_data(2, 2);
    let all: Vec<_> = d.samples.iter().collect();
    for mode in [EnsembleMode::WaveletAttention, EnsembleMode::Average, EnsembleMode::GateNetwork] {
        let mut cfg = tiny_cfg(&d);
        cfg.max_epochs = 2;
        cfg.model.ensemble_mode = mode;
        let out = train::<f32>(&all, &[], &cfg).unwrap();
        let r = &out.log[0];
        assert_eq!(r.l_imp.is_some(), mode == EnsembleMode::GateNetwork, "{mode:?}");
        if mode != EnsembleMode::WaveletAttention {
            assert_eq!(r.l_norm, 0.0);
        }
        let imp = r.l_imp.map_or(0.0, |v| v * cfg.gate_importance_weight);
        let sum = r.l_ce + r.l_distill + cfg.distill.lambda * r.l_norm + imp;
        assert!((r.total - sum).abs() < 1e-9);
    }
}

#[test]
fn cross_validation_counts_and_hygiene() {
    let d = tiny_data(6, 1);
    let mut cfg = tiny_cfg(&d);
    cfg.max_epochs = 1;
    let cv = CvConfig { folds: 3, repeats: 1, jobs: 1 };
    let res = cross_validate::<f32>(&d, &cfg, &cv).unwrap();
    assert_eq!(res.entries.len(), 3);
    for e in &res.entries {
        for p in &e.test_patients {
            assert!(!e.train_patients.contains(p) && !e.val_patients.contains(p));
        }
        assert_eq!(e.seed, cfg.seed + e.fold as u64);
        assert_eq!(e.test_patients.len(), 2);
        assert_eq!(e.val_patients.len(), 1);
    }
    let two = cross_validate::<f32>(&d, &cfg, &CvConfig { repeats: 2, ..cv.clone() }).unwrap();
    assert_eq!(two.entries.len(), 6);
    assert_eq!(two.entries[3].seed, cfg.seed + 1000);
    assert!(res.bca.std >= 0.0);
    assert!(matches!(cross_validate::<f32>(&d, &cfg, &CvConfig { folds: 7, ..cv }), Err(TrainError::Data(_))));
}

#[test]
fn parallel_jobs_match_serial() {
    let d = tiny_data(6, 1);
    let mut cfg = tiny_cfg(&d);
    cfg.max_epochs = 2;
    let cv = CvConfig { folds: 3, repeats: 1, jobs: 1 };
    let serial = cross_validate::<f64>(&d, &cfg, &cv).unwrap();
    let parallel = cross_validate::<f64>(&d, &cfg, &CvConfig { jobs: 3, ..cv }).unwrap();
    assert_eq!(serial, parallel);
}

#[test]
fn evaluate_matches_predictions() {
    let d = tiny_data(2, 2);
    let cfg = tiny_cfg(&d);
    let model = crate::model::MbmdModel::<f32>::new(cfg.model.clone(), 1).unwrap();
    let all: Vec<_> = d.samples.iter().collect();
    let rep = evaluate(&model, &all).unwrap();
    let preds: Vec<usize> = predict(&model, &all, 5).unwrap().iter().map(|z| crate::losses::argmax(z)).collect();
    let labels: Vec<usize> = all.iter().map(|s| s.label).collect();
    assert_eq!(rep, MetricsReport::from_predictions(&labels, &preds, 2).unwrap());
    let mut bad = d.samples[0].clone();
    bad.label = 3;
    assert!(matches!(evaluate(&model, &[&bad]), Err(TrainError::ClassCount { .. })));
}

#[test]
fn training_log_csv_has_declared_columns() {
    let log = vec![EpochLog {
        epoch: 1,
        l_ce: 1.0,
        l_distill: 0.5,
        l_norm: 0.0,
        l_imp: None,
        total: 1.5,
        val_loss: Some(1.2),
        val_acc: None,
        val_bca: None,
        val_f1: None,
    }];
    let mut buf = Vec::new();
    write_training_log(&mut buf, &log).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,l_ce,l_distill,l_norm,l_imp,total,val_loss,val_acc,val_bca,val_f1");
    assert_eq!(lines.next().unwrap(), "1,1,0.5,0,,1.5,1.2,,,");
}

#[test]
fn gradcheck_suite_passes() {
    let rows = gradcheck_suite(7).unwrap();
    assert!(rows.iter().any(|r| r.name.starts_with("model_loss")));
    for r in rows {
        assert!(r.passed, "{}: {}", r.name, r.max_rel_err);
    }
}
