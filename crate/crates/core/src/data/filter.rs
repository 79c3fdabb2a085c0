use std::f64::consts::PI;

/// Second-order IIR section, `a0` normalised to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        let a0 = a[0];
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [1.0, a[1] / a0, a[2] / a0] }
    }

    /// Band-stop at `f0` with quality factor `q`.
    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::normalized([1.0, -2.0 * c, 1.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Low-pass section; a cascade with Butterworth `q` values gives a
    /// Butterworth response.
    pub fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::normalized([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Magnitude response at `f` Hz.
    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -(c[1] * w.sin() + c[2] * (2.0 * w).sin());
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Transposed direct-form II state for a unit step in steady state.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let y = (b0 + b1 + b2) / (1.0 + a1 + a2);
        [b1 + b2 - (a1 + a2) * y, b2 - a2 * y]
    }

    /// Causal filtering with steady-state initial conditions scaled to `x[0]`.
    pub fn filter(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let [s1, s2] = self.step_state();
        let (mut z1, mut z2) = (s1 * x0, s2 * x0);
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z1;
            z1 = b1 * xi - a1 * y + z2;
            z2 = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// Even-order Butterworth low-pass as a cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct Butterworth {
    pub sections: Vec<Biquad>,
}

impl Butterworth {
    pub fn lowpass(order: usize, fc: f64, fs: f64) -> Self {
        assert!(order >= 2 && order.is_multiple_of(2), "order must be even");
        let sections = (0..order / 2)
            .map(|k| {
                let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
                Biquad::lowpass(fc, fs, 1.0 / (2.0 * theta.cos()))
            })
            .collect();
        Self { sections }
    }

    /// Low-pass whose forward-backward application is 3 dB down at `f3db`.
    pub fn zero_phase_lowpass(order: usize, f3db: f64, fs: f64) -> Self {
        // |H|^4 = 1/2 at f3db  =>  (W/Wc)^(2n) = sqrt(2) - 1 in the warped domain
        let ratio = (2f64.sqrt() - 1.0).powf(1.0 / (2 * order) as f64);
        let warped = (PI * f3db / fs).tan() / ratio;
        let fc = warped.atan() * fs / PI;
        Self::lowpass(order, fc, fs)
    }

    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.gain(f, fs)).product()
    }
}

/// Least-squares linear-prediction extrapolation of `n` samples past the
/// end of `x`. Returns `None` when the fit is degenerate or the
/// extrapolation grows beyond the signal's range.
fn predict_tail(x: &[f64], order: usize, n: usize) -> Option<Vec<f64>> {
    let p = order.min(x.len() / 4);
    if p == 0 || n == 0 {
        return None;
    }
    // normal equations R a = r for x[t] ~ sum_k a_k x[t - 1 - k]
    let mut r = vec![vec![0.0; p + 1]; p];
    for t in p..x.len() {
        for i in 0..p {
            let xi = x[t - 1 - i];
            for j in 0..p {
                r[i][j] += xi * x[t - 1 - j];
            }
            r[i][p] += xi * x[t];
        }
    }
    let trace: f64 = (0..p).map(|i| r[i][i]).sum();
    if !(trace > 0.0) {
        return None;
    }
    for (i, row) in r.iter_mut().enumerate() {
        row[i] += 1e-10 * trace / p as f64;
    }
    // Gaussian elimination with partial pivoting
    for col in 0..p {
        let piv = (col..p).max_by(|&a, &b| r[a][col].abs().total_cmp(&r[b][col].abs()))?;
        r.swap(col, piv);
        let d = r[col][col];
        if d.abs() < 1e-300 {
            return None;
        }
        for row in col + 1..p {
            let f = r[row][col] / d;
            if f != 0.0 {
                let (top, rest) = r.split_at_mut(row);
                for (dst, src) in rest[0][col..=p].iter_mut().zip(&top[col][col..=p]) {
                    *dst -= f * src;
                }
            }
        }
    }
    let mut a = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| r[i][k] * a[k]).sum();
        a[i] = (r[i][p] - s) / r[i][i];
    }
    let bound = 4.0 * x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut hist: Vec<f64> = x[x.len() - p..].to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let next: f64 = a.iter().enumerate().map(|(k, ak)| ak * hist[hist.len() - 1 - k]).sum();
        if !next.is_finite() || next.abs() > bound {
            return None;
        }
        hist.push(next);
        out.push(next);
    }
    Some(out)
}

fn odd_tail(x: &[f64], n: usize) -> Vec<f64> {
    let last = x[x.len() - 1];
    (1..=n).map(|i| 2.0 * last - x[x.len() - 1 - i]).collect()
}

/// Zero-phase forward-backward filtering. Both edges are extended by
/// `pad` samples using linear prediction (falling back to odd reflection)
/// so that narrowband components continue phase-coherently into the pad.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = pad.min(n - 1);
    let tail = predict_tail(x, 32, pad).unwrap_or_else(|| odd_tail(x, pad));
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    let head = predict_tail(&rev, 32, pad).unwrap_or_else(|| odd_tail(&rev, pad));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend(head.iter().rev());
    ext.extend_from_slice(x);
    ext.extend_from_slice(&tail);
    for s in sections {
        s.filter(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.filter(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn notch_kills_centre_frequency() {
        let n = Biquad::notch(50.0, 128.0, 30.0);
        assert!(n.gain(50.0, 128.0) < 1e-9);
        assert!((n.gain(0.0, 128.0) - 1.0).abs() < 1e-12);
        assert!(n.gain(40.0, 128.0) > 0.95);
    }

    #[test]
    fn zero_phase_corner_is_three_db() {
        let fs = 256.0;
        let bw = Butterworth::zero_phase_lowpass(4, 64.0, fs);
        let g = bw.gain(64.0, fs).powi(2);
        assert!((g - 0.5f64.sqrt()).abs() < 1e-9, "{g}");
        assert!((bw.gain(0.0, fs) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filtfilt_passes_dc_exactly() {
        let sections = Butterworth::lowpass(4, 20.0, 128.0).sections;
        let y = filtfilt(&sections, &[3.0; 100], 50);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-9));
    }

    #[test]
    fn prediction_continues_a_sinusoid() {
        let x: Vec<f64> = (0..300).map(|i| (0.37 * i as f64 + 0.2).sin()).collect();
        let tail = predict_tail(&x, 32, 100).unwrap();
        for (k, v) in tail.iter().enumerate() {
            let want = (0.37 * (300 + k) as f64 + 0.2).sin();
            assert!((v - want).abs() < 1e-4, "{k}: {v} vs {want}");
        }
        assert!(predict_tail(&[0.0; 50], 8, 10).is_none());
    }
}
