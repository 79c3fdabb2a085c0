use serde::{Deserialize, Serialize};

use super::filter::{filtfilt, Biquad, Butterworth};
use super::{DataError, EegTrial};
use crate::diffcore::Tensor;

pub const TARGET_RATE_HZ: f64 = 128.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Notch centre; `None` disables the notch.
    pub notch_hz: Option<f64>,
    pub notch_q: f64,
    /// Low-pass -3 dB point, applied at the source rate before resampling.
    pub lowpass_hz: Option<f64>,
    /// Order of each pass; the zero-phase response has twice this order.
    pub lowpass_order: usize,
    pub detrend: bool,
    /// Odd-extension length at each edge for zero-phase filtering.
    pub pad_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { notch_hz: Some(50.0), notch_q: 30.0, lowpass_hz: Some(64.0), lowpass_order: 4, detrend: true, pad_seconds: 2.0 }
    }
}

/// Removes the least-squares line from `x` in place.
pub fn detrend(x: &mut [f64]) {
    let n = x.len();
    if n == 0 {
        return;
    }
    let tm = (n as f64 - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - xm);
        sxx += dt * dt;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    for (i, v) in x.iter_mut().enumerate() {
        *v -= xm + slope * (i as f64 - tm);
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resamples `x` from `from` Hz to `to` Hz. Integral ratios decimate
/// directly; other ratios use a polyphase windowed-sinc interpolator.
pub fn resample(x: &[f64], from: f64, to: f64) -> Result<Vec<f64>, DataError> {
    if !(from > 0.0 && to > 0.0) {
        return Err(DataError::Invalid(format!("resample {from} -> {to} Hz")));
    }
    let ratio = from / to;
    if (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0 {
        return Ok(x.iter().step_by(ratio.round() as usize).copied().collect());
    }
    let (f, t) = ((from * 1000.0).round() as u64, (to * 1000.0).round() as u64);
    let g = gcd(f, t);
    let (up, down) = ((t / g) as usize, (f / g) as usize);
    if up.max(down) > 100_000 {
        return Err(DataError::Unsupported(format!("rate ratio {from}/{to} is too fine-grained")));
    }
    let m = up.max(down);
    let half = 10 * m;
    let fc = 0.5 / m as f64;
    let taps: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let t = k as f64 - half as f64;
            let sinc = if t == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * 2.0 * fc * t;
                a.sin() / a
            };
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (2 * half) as f64).cos();
            2.0 * fc * sinc * w * up as f64
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    let mut y = Vec::with_capacity(out_len);
    for mi in 0..out_len {
        // y[m] = sum_n x[n] h[m*down - n*up + half]
        let centre = mi * down + half;
        let n_hi = (centre / up).min(x.len().saturating_sub(1));
        let n_lo = centre.saturating_sub(2 * half).div_ceil(up);
        let mut acc = 0.0;
        let mut n = n_lo;
        while n <= n_hi {
            acc += x[n] * taps[centre - n * up];
            n += 1;
        }
        y.push(acc);
    }
    Ok(y)
}

/// Filters, resamples to 128 Hz and detrends every channel.
pub fn preprocess_trial(trial: &EegTrial, cfg: &PreprocessConfig) -> Result<EegTrial, DataError> {
    trial.validate()?;
    let fs = trial.sample_rate_hz;
    if fs < TARGET_RATE_HZ - 1e-9 {
        return Err(DataError::UnsupportedRate(fs));
    }
    let pad_in = (cfg.pad_seconds * fs).round() as usize;
    let pad_out = (cfg.pad_seconds * TARGET_RATE_HZ).round() as usize;
    let lowpass = cfg.lowpass_hz.filter(|&f| f < fs / 2.0).map(|f| Butterworth::zero_phase_lowpass(cfg.lowpass_order, f, fs).sections);
    let notch = cfg.notch_hz.filter(|&f| f < TARGET_RATE_HZ / 2.0).map(|f| [Biquad::notch(f, TARGET_RATE_HZ, cfg.notch_q)]);
    let mut rows = Vec::with_capacity(trial.channels());
    for c in 0..trial.channels() {
        let mut x = trial.channel(c).to_vec();
        if let Some(lp) = &lowpass {
            x = filtfilt(lp, &x, pad_in);
        }
        let mut x = resample(&x, fs, TARGET_RATE_HZ)?;
        if let Some(n) = &notch {
            x = filtfilt(n, &x, pad_out);
        }
        if cfg.detrend {
            detrend(&mut x);
        }
        rows.push(x);
    }
    let len = rows[0].len();
    if len == 0 {
        return Err(DataError::Invalid(format!("trial {} is empty after resampling", trial.id)));
    }
    let samples = Tensor::matrix(rows.len(), len, rows.concat()).map_err(|e| DataError::Invalid(e.to_string()))?;
    if !samples.is_finite() {
        return Err(DataError::Invalid(format!("trial {}: preprocessing produced non-finite values", trial.id)));
    }
    Ok(EegTrial { sample_rate_hz: TARGET_RATE_HZ, samples, ..trial.clone() })
}
