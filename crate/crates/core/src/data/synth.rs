use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    default_channel_names, write_manifest, write_trial_binary, DataError, DatasetManifest, EegTrial, ManifestEntry, ManifestLabel,
    MANIFEST_VERSION,
};
use crate::diffcore::Tensor;

/// Band codes for synthetic classes: class `c` carries tones inside
/// `SYNTH_BANDS[c]`. The two gamma codes straddle the 50 Hz notch.
pub const SYNTH_BANDS: [(&str, f64, f64); 6] = [
    ("delta", 0.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 16.0),
    ("beta", 16.0, 32.0),
    ("gamma_low", 32.0, 48.0),
    ("gamma_high", 52.0, 64.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_patients: usize,
    pub trials_per_patient: usize,
    pub num_classes: usize,
    /// Signal-to-noise power ratio in dB; `None` means noiseless.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub channels: usize,
    pub trial_seconds: f64,
    pub sample_rate_hz: f64,
    pub tones_per_trial: usize,
    /// Per-patient amplitude scale is drawn from `1 +- amplitude_jitter`.
    pub amplitude_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_patients: 6,
            trials_per_patient: 32,
            num_classes: 4,
            snr_db: Some(10.0),
            seed: 0,
            channels: 1,
            trial_seconds: 4.0,
            sample_rate_hz: 128.0,
            tones_per_trial: 3,
            amplitude_jitter: 0.3,
        }
    }
}

/// Tone frequencies usable for a band: multiples of 0.25 Hz at least 0.75 Hz
/// inside each edge (and at least 1 Hz).
fn tone_grid(lo: f64, hi: f64) -> Vec<f64> {
    let start = ((lo + 0.75).max(1.0) * 4.0).ceil() as i64;
    let end = ((hi - 0.75) * 4.0).floor() as i64;
    (start..=end).map(|q| q as f64 / 4.0).collect()
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<(DatasetManifest, Vec<EegTrial>), DataError> {
    if cfg.num_classes > SYNTH_BANDS.len() {
        return Err(DataError::Unsupported(format!("{} classes requested, only {} band codes exist", cfg.num_classes, SYNTH_BANDS.len())));
    }
    if cfg.num_classes < 2 || cfg.channels == 0 || cfg.tones_per_trial == 0 {
        return Err(DataError::Invalid("synthetic data needs K >= 2, C >= 1 and at least one tone".into()));
    }
    if cfg.sample_rate_hz < 2.0 * SYNTH_BANDS[cfg.num_classes - 1].2 {
        return Err(DataError::Invalid(format!("sample rate {} too low for the band codes", cfg.sample_rate_hz)));
    }
    let len = (cfg.trial_seconds * cfg.sample_rate_hz).round() as usize;
    if len == 0 {
        return Err(DataError::Invalid("trial length is zero".into()));
    }
    let grids: Vec<Vec<f64>> = SYNTH_BANDS[..cfg.num_classes].iter().map(|&(_, lo, hi)| tone_grid(lo, hi)).collect();
    let noise_scale = cfg.snr_db.map(|db| 10f64.powf(-db / 20.0));
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let width = cfg.num_patients.to_string().len().max(2);
    let mut trials = Vec::new();
    let mut entries = Vec::new();
    for p in 0..cfg.num_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(p as u64));
        // separate stream so noise level does not change the tone draws
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(p as u64) ^ 0x9e37_79b9_7f4a_7c15);
        let patient = format!("p{p:0width$}");
        let gains: Vec<f64> = (0..cfg.channels).map(|_| 1.0 + cfg.amplitude_jitter * rng.gen_range(-1.0..1.0)).collect();
        for t in 0..cfg.trials_per_patient {
            let label = (p + t) % cfg.num_classes;
            let freqs: Vec<f64> = (0..cfg.tones_per_trial).map(|_| grids[label][rng.gen_range(0..grids[label].len())]).collect();
            let amps: Vec<f64> = (0..cfg.tones_per_trial).map(|_| rng.gen_range(0.5..1.0)).collect();
            let mut data = Vec::with_capacity(cfg.channels * len);
            for &gain in &gains {
                let phases: Vec<f64> = (0..cfg.tones_per_trial).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                let power: f64 = amps.iter().map(|a| (gain * a).powi(2) / 2.0).sum();
                let sigma = noise_scale.map(|s| s * power.sqrt()).unwrap_or(0.0);
                for i in 0..len {
                    let time = i as f64 / cfg.sample_rate_hz;
                    let mut v: f64 = freqs
                        .iter()
                        .zip(&amps)
                        .zip(&phases)
                        .map(|((f, a), ph)| gain * a * (std::f64::consts::TAU * f * time + ph).sin())
                        .sum();
                    if sigma > 0.0 {
                        v += sigma * unit.sample(&mut noise_rng);
                    }
                    data.push(v);
                }
            }
            let id = format!("{patient}_t{t:03}.eegt");
            entries.push(ManifestEntry {
                path: id.clone(),
                patient: patient.clone(),
                label: ManifestLabel::Name(SYNTH_BANDS[label].0.to_string()),
                rate_hz: cfg.sample_rate_hz,
            });
            trials.push(EegTrial {
                id,
                patient_id: patient.clone(),
                label,
                sample_rate_hz: cfg.sample_rate_hz,
                samples: Tensor::matrix(cfg.channels, len, data).map_err(|e| DataError::Invalid(e.to_string()))?,
                channel_names: default_channel_names(cfg.channels),
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        classes: SYNTH_BANDS[..cfg.num_classes].iter().map(|b| b.0.to_string()).collect(),
        channels: Some(cfg.channels),
        trials: entries,
    };
    Ok((manifest, trials))
}

/// Generates the dataset and writes binary trial files plus `manifest.json`
/// into `dir`. Returns the manifest path.
pub fn write_synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf, DataError> {
    let (manifest, trials) = synth_dataset(cfg)?;
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    for t in &trials {
        write_trial_binary(&dir.join(&t.id), &t.samples)?;
    }
    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest)?;
    Ok(path)
}
