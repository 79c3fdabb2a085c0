use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{default_channel_names, DataError, DatasetManifest, EegTrial, MANIFEST_VERSION};
use crate::diffcore::Tensor;

pub const TRIAL_MAGIC: &[u8; 4] = b"EEGT";
pub const TRIAL_VERSION: u32 = 1;

/// A class given by index or by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestLabel {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub patient: String,
    pub label: ManifestLabel,
    pub rate_hz: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io { path: path.to_path_buf(), source }
        }
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Parse { path: path.to_path_buf(), msg: msg.into() }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(DataError::Version(m.format_version));
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| parse_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_binary(path: &Path, bytes: &[u8]) -> Result<Tensor<f64>, DataError> {
    if bytes.len() < 20 {
        return Err(parse_err(path, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TRIAL_VERSION {
        return Err(parse_err(path, format!("trial format version {version} not supported")));
    }
    let c = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let l = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    let want = c.checked_mul(l).and_then(|n| n.checked_mul(4));
    if want != Some(body.len()) {
        return Err(parse_err(path, format!("header says {c} x {l} but body has {} bytes", body.len())));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Tensor::matrix(c, l, data).map_err(|e| parse_err(path, e.to_string()))
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<Tensor<f64>, DataError> {
    let text = std::str::from_utf8(bytes).map_err(|_| parse_err(path, "not UTF-8 and not a binary trial"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(path, format!("line {}: {} columns, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "no samples"));
    }
    let (c, l) = (rows.len(), rows[0].len());
    Tensor::matrix(c, l, rows.concat()).map_err(|e| parse_err(path, e.to_string()))
}

/// Reads a `C x L` trial from the binary format or CSV (one row per channel).
pub fn read_trial_file(path: &Path) -> Result<Tensor<f64>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let t = if bytes.starts_with(TRIAL_MAGIC) { read_binary(path, &bytes)? } else { read_csv(path, &bytes)? };
    if !t.is_finite() {
        return Err(parse_err(path, "non-finite sample"));
    }
    Ok(t)
}

pub fn write_trial_binary(path: &Path, samples: &Tensor<f64>) -> Result<(), DataError> {
    let (c, l) = samples.dims2().ok_or_else(|| DataError::Invalid("trial must be C x L".into()))?;
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut put = |b: &[u8]| w.write_all(b).map_err(io_err(path));
    put(TRIAL_MAGIC)?;
    put(&TRIAL_VERSION.to_le_bytes())?;
    put(&(c as u32).to_le_bytes())?;
    put(&(l as u64).to_le_bytes())?;
    for &v in samples.data() {
        put(&(v as f32).to_le_bytes())?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_trial_csv(path: &Path, samples: &Tensor<f64>) -> Result<(), DataError> {
    let mut text = String::new();
    for r in 0..samples.rows() {
        let row: Vec<String> = samples.row_slice(r).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest and every trial it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<EegTrial>), DataError> {
    let manifest = read_manifest(manifest_path)?;
    let classes = manifest.class_spec()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for (i, e) in manifest.trials.iter().enumerate() {
        let label = match &e.label {
            ManifestLabel::Index(k) if *k < classes.num_classes() => *k,
            ManifestLabel::Name(n) => classes.index_of(n).ok_or_else(|| DataError::UnknownLabel { entry: i, label: n.clone() })?,
            ManifestLabel::Index(k) => return Err(DataError::UnknownLabel { entry: i, label: k.to_string() }),
        };
        if e.patient.is_empty() {
            return Err(DataError::Invalid(format!("trial {i}: empty patient id")));
        }
        if !(e.rate_hz > 0.0) {
            return Err(DataError::Invalid(format!("trial {i}: sample rate {}", e.rate_hz)));
        }
        let path = resolve(base, &e.path);
        let samples = read_trial_file(&path)?;
        if let Some(c) = manifest.channels {
            if samples.rows() != c {
                return Err(DataError::ShapeMismatch { path, expected: c, got: samples.rows() });
            }
        }
        trials.push(EegTrial {
            id: e.path.clone(),
            patient_id: e.patient.clone(),
            label,
            sample_rate_hz: e.rate_hz,
            channel_names: default_channel_names(samples.rows()),
            samples,
        });
    }
    Ok((manifest, trials))
}
