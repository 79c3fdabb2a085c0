//! Wavelet packet decomposition of 128 Hz windows into band signals.
//!
//! Analysis uses an orthonormal Daubechies-4 filter pair with periodic
//! boundaries, so every level conserves energy exactly and node lengths are
//! exactly `L / 2^d`.

use serde::{Deserialize, Serialize};

use crate::data::{EegWindow, TARGET_RATE_HZ};
use crate::diffcore::Tensor;

pub const DEFAULT_DEPTH: usize = 4;

/// Daubechies-4 scaling (reconstruction low-pass) coefficients.
const DB4: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WpdError {
    #[error("signal length {len} is not divisible by 2^{depth}")]
    Shape { len: usize, depth: usize },
    #[error("band {lo}-{hi} Hz does not align with {leaf} Hz leaves")]
    Alignment { lo: f64, hi: f64, leaf: f64 },
    #[error("window sample rate {0} Hz, expected 128")]
    Rate(f64),
    #[error("no preset for {0} branches (expected 2, 3 or 6)")]
    Preset(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterPair {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub synth_low: Vec<f64>,
    pub synth_high: Vec<f64>,
}

impl FilterPair {
    pub fn db4() -> Self {
        let h = DB4.to_vec();
        let n = h.len();
        // quadrature mirror: g[k] = (-1)^k h[n-1-k]
        let g: Vec<f64> = (0..n).map(|k| if k % 2 == 0 { h[n - 1 - k] } else { -h[n - 1 - k] }).collect();
        Self { low: h.clone(), high: g.clone(), synth_low: h, synth_high: g }
    }

    /// One periodic analysis step: `(approximation, detail)`.
    pub fn analyze(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let half = n / 2;
        let mut a = vec![0.0; half];
        let mut d = vec![0.0; half];
        for k in 0..half {
            let (mut sa, mut sd) = (0.0, 0.0);
            for (j, (&l, &h)) in self.low.iter().zip(&self.high).enumerate() {
                let v = x[(2 * k + j) % n];
                sa += l * v;
                sd += h * v;
            }
            a[k] = sa;
            d[k] = sd;
        }
        (a, d)
    }

    /// Inverse of [`FilterPair::analyze`].
    pub fn synthesize(&self, a: &[f64], d: &[f64]) -> Vec<f64> {
        let n = 2 * a.len();
        let mut x = vec![0.0; n];
        for k in 0..a.len() {
            for (j, (&l, &h)) in self.synth_low.iter().zip(&self.synth_high).enumerate() {
                x[(2 * k + j) % n] += l * a[k] + h * d[k];
            }
        }
        x
    }
}

/// Full packet tree. `levels[d]` holds the `2^d` nodes of level `d` in
/// filter order (children of node `i` are `2i` low and `2i + 1` high).
#[derive(Clone, Debug, PartialEq)]
pub struct WpdTree {
    pub depth: usize,
    pub levels: Vec<Vec<Vec<f64>>>,
}

/// Filter-order index of the node covering frequency slot `f` at level `d`.
/// High-pass branches mirror the spectrum, so the mapping is a Gray code.
fn freq_to_node(f: usize) -> usize {
    f ^ (f >> 1)
}

impl WpdTree {
    pub fn len(&self) -> usize {
        self.levels[0][0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaves in natural frequency order: leaf `j` covers `[j, j+1) * 64 / 2^depth` Hz.
    pub fn leaf(&self, j: usize) -> &[f64] {
        &self.levels[self.depth][freq_to_node(j)]
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn leaf_bandwidth_hz(&self) -> f64 {
        TARGET_RATE_HZ / 2.0 / self.num_leaves() as f64
    }
}

pub fn wpd_analyze(signal: &[f64], depth: usize) -> Result<WpdTree, WpdError> {
    wpd_analyze_with(&FilterPair::db4(), signal, depth)
}

pub fn wpd_analyze_with(filters: &FilterPair, signal: &[f64], depth: usize) -> Result<WpdTree, WpdError> {
    let len = signal.len();
    if depth == 0 || len == 0 || !len.is_multiple_of(1 << depth) {
        return Err(WpdError::Shape { len, depth });
    }
    let mut levels = vec![vec![signal.to_vec()]];
    for d in 0..depth {
        let next = levels[d]
            .iter()
            .flat_map(|node| {
                let (a, b) = filters.analyze(node);
                [a, b]
            })
            .collect();
        levels.push(next);
    }
    Ok(WpdTree { depth, levels })
}

/// Reconstructs from the leaves selected by `keep` (indexed in frequency order).
pub fn reconstruct_leaves(tree: &WpdTree, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let filters = FilterPair::db4();
    let leaves = tree.num_leaves();
    let mut nodes: Vec<Vec<f64>> = vec![Vec::new(); leaves];
    for f in 0..leaves {
        let node = freq_to_node(f);
        nodes[node] = if keep(f) { tree.levels[tree.depth][node].clone() } else { vec![0.0; tree.levels[tree.depth][node].len()] };
    }
    while nodes.len() > 1 {
        nodes = nodes.chunks(2).map(|p| filters.synthesize(&p[0], &p[1])).collect();
    }
    nodes.pop().unwrap_or_default()
}

/// Frequency-slot range `[lo_slot, hi_slot)` for a band.
fn band_slots(tree: &WpdTree, lo: f64, hi: f64) -> Result<(usize, usize), WpdError> {
    let bw = tree.leaf_bandwidth_hz();
    let (a, b) = (lo / bw, hi / bw);
    let aligned = |v: f64| (v - v.round()).abs() < 1e-9;
    if !aligned(a) || !aligned(b) || lo < 0.0 || hi > TARGET_RATE_HZ / 2.0 + 1e-9 || hi < lo {
        return Err(WpdError::Alignment { lo, hi, leaf: bw });
    }
    Ok((a.round() as usize, b.round() as usize))
}

/// Inverse transform keeping only the leaves inside `[lo_hz, hi_hz)`.
pub fn band_reconstruct(tree: &WpdTree, lo_hz: f64, hi_hz: f64) -> Result<Vec<f64>, WpdError> {
    let (a, b) = band_slots(tree, lo_hz, hi_hz)?;
    Ok(reconstruct_leaves(tree, |f| f >= a && f < b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

/// How the reconstruction residual is exposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// Dropped.
    None,
    /// Its own branch named `other`.
    Separate,
    /// Added to the last band.
    MergeIntoLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandGrouping {
    pub bands: Vec<Band>,
    pub residual: Residual,
}

fn band(name: &str, lo: f64, hi: f64) -> Band {
    Band { name: name.into(), lo_hz: lo, hi_hz: hi }
}

impl BandGrouping {
    pub fn num_branches(&self) -> usize {
        self.bands.len() + usize::from(self.residual == Residual::Separate)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bands.iter().map(|b| b.name.clone()).collect();
        if self.residual == Residual::Separate {
            names.push("other".into());
        }
        names
    }

    pub fn validate(&self) -> Result<(), WpdError> {
        let mut prev = 0.0;
        for b in &self.bands {
            if b.lo_hz < prev - 1e-12 || b.hi_hz <= b.lo_hz || b.hi_hz > TARGET_RATE_HZ / 2.0 {
                return Err(WpdError::Alignment { lo: b.lo_hz, hi: b.hi_hz, leaf: TARGET_RATE_HZ / 2.0 / (1 << DEFAULT_DEPTH) as f64 });
            }
            prev = b.hi_hz;
        }
        Ok(())
    }
}

pub fn band_grouping_preset(num_branches: usize) -> Result<BandGrouping, WpdError> {
    let g = match num_branches {
        6 => BandGrouping {
            bands: vec![
                band("delta", 0.0, 4.0),
                band("theta", 4.0, 8.0),
                band("alpha", 8.0, 16.0),
                band("beta", 16.0, 32.0),
                band("gamma", 32.0, 64.0),
            ],
            residual: Residual::Separate,
        },
        3 => BandGrouping {
            bands: vec![band("delta_theta", 0.0, 8.0), band("alpha_beta", 8.0, 32.0), band("gamma_other", 32.0, 64.0)],
            residual: Residual::MergeIntoLast,
        },
        2 => BandGrouping { bands: vec![band("low", 0.0, 16.0), band("high", 16.0, 64.0)], residual: Residual::MergeIntoLast },
        n => return Err(WpdError::Preset(n)),
    };
    Ok(g)
}

/// Per-window band signals, in grouping order, each the window's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSet {
    pub window_id: String,
    pub names: Vec<String>,
    pub signals: Vec<Tensor<f64>>,
}

/// Decomposes every row of a `C x L` matrix.
pub fn decompose_matrix(samples: &Tensor<f64>, grouping: &BandGrouping) -> Result<Vec<Tensor<f64>>, WpdError> {
    grouping.validate()?;
    let (c, l) = samples.dims2().ok_or(WpdError::Shape { len: 0, depth: DEFAULT_DEPTH })?;
    let nb = grouping.num_branches();
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(c * l); nb];
    for ch in 0..c {
        let x = samples.row_slice(ch);
        let tree = wpd_analyze(x, DEFAULT_DEPTH)?;
        let mut sum = vec![0.0; l];
        let mut parts = Vec::with_capacity(nb);
        for b in &grouping.bands {
            let y = band_reconstruct(&tree, b.lo_hz, b.hi_hz)?;
            for (s, v) in sum.iter_mut().zip(&y) {
                *s += v;
            }
            parts.push(y);
        }
        let residual: Vec<f64> = x.iter().zip(&sum).map(|(a, b)| a - b).collect();
        match grouping.residual {
            Residual::None => {}
            Residual::Separate => parts.push(residual),
            Residual::MergeIntoLast => {
                if let Some(last) = parts.last_mut() {
                    for (v, r) in last.iter_mut().zip(&residual) {
                        *v += r;
                    }
                }
            }
        }
        for (dst, p) in out.iter_mut().zip(parts) {
            dst.extend(p);
        }
    }
    Ok(out.into_iter().map(|d| Tensor::matrix(c, l, d).expect("band shape matches window")).collect())
}

pub fn decompose_bands(window: &EegWindow, grouping: &BandGrouping) -> Result<BandSet, WpdError> {
    if (window.sample_rate_hz - TARGET_RATE_HZ).abs() > 1e-9 {
        return Err(WpdError::Rate(window.sample_rate_hz));
    }
    Ok(BandSet { window_id: window.id(), names: grouping.names(), signals: decompose_matrix(&window.samples, grouping)? })
}
