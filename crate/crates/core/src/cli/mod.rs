//! The `mbmd` command line.

mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_dataset, preprocess_trial, segment, write_manifest, write_synth_dataset, write_trial_binary, DataError, DatasetManifest,
    ManifestEntry, ManifestLabel, SynthConfig, MANIFEST_VERSION,
};
use crate::diffcore::Scalar;
use crate::model::{load_checkpoint, save_checkpoint, ModelError};
use crate::train::{
    ablation_suite, cross_validate, evaluate, gradcheck_suite, train, write_aggregate_csv, write_results_csv, write_training_log, CvConfig,
    CvResult, DataConfig, PreparedDataset, Suite, TrainConfig, TrainError,
};
use crate::wpd::{band_grouping_preset, decompose_bands, WpdError};

pub use report::{render_report, ReportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Environment switch for 64-bit verification mode.
pub const VERIFY_ENV: &str = "MBMD_VERIFY";

#[derive(Debug, Parser)]
#[command(name = "mbmd", version, about = "Multi-branch mutual-distillation transformer for EEG seizure subtypes")]
pub struct Cli {
    /// Worker threads for data preparation and cross-validation folds.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic band-coded dataset.
    Synth(Common),
    /// Filter, resample and detrend every trial into a new dataset.
    Preprocess(Common),
    /// Write per-window band signals.
    Decompose(Common),
    /// Train one model on all patients (with a validation holdout).
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cross-patient cross-validation.
    Cv(Common),
    /// Run an ablation suite (or `all`).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Option<String>,
    },
    /// Finite-difference check of every op and the model objective.
    Gradcheck(Common),
    /// Charts and a markdown table from result CSVs.
    Report {
        /// Directory holding `*aggregate.csv` files.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Everything a run needs, as one JSON document. Omitted keys take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub suite: Option<String>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub cv: CvConfig,
    pub synth: SynthConfig,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn config(m: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, m)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::InfeasibleFolds { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<WpdError> for CliError {
    fn from(e: WpdError) -> Self {
        let code = if matches!(e, WpdError::Preset(_)) { EXIT_CONFIG } else { EXIT_DATA };
        Self::new(code, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Config(_) => EXIT_CONFIG,
            ModelError::Graph(crate::diffcore::DiffError::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Wpd(w) => w.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Invalid(m) => Self::config(m),
            TrainError::NonFinite(_) | TrainError::Graph(_) | TrainError::Loss(_) => Self::new(EXIT_NUMERIC, e.to_string()),
            other => Self::new(EXIT_DATA, other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_DATA, e.to_string())
    }
}

pub fn verify_mode() -> bool {
    std::env::var(VERIFY_ENV).is_ok_and(|v| v == "1")
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Merges flags over the config file and validates the result.
fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = load_run_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    cfg.out = Some(common.out.clone());
    cfg.train.validate().map_err(|e| CliError::config(e.to_string()))?;
    band_grouping_preset(cfg.data.branches)?;
    if !(0.0..1.0).contains(&cfg.data.overlap) || !(cfg.data.window_seconds > 0.0) {
        return Err(CliError::config("data.overlap must be in [0, 1) and data.window_seconds positive"));
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::new(EXIT_DATA, format!("{}: {e}", out.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(EXIT_DATA, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Git blob hash (`sha256("blob <len>\0" + bytes)`) of a file.
pub fn content_hash(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes the resolved config and the input hash, then returns the manifest path.
fn describe_run(cfg: &RunConfig, out: &Path) -> Result<Option<PathBuf>, CliError> {
    create_out(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let mut inputs = serde_json::Map::new();
    inputs.insert("verify_mode".into(), verify_mode().into());
    if let Some(m) = &cfg.dataset {
        let hash = content_hash(m).map_err(|e| CliError::new(EXIT_DATA, format!("{}: {e}", m.display())))?;
        inputs.insert("manifest".into(), m.display().to_string().into());
        inputs.insert("manifest_sha256".into(), hash.into());
    }
    write_json(&out.join("inputs.json"), &inputs)?;
    Ok(cfg.dataset.clone())
}

fn require_dataset(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    describe_run(cfg, out)?.ok_or_else(|| CliError::config("no dataset: pass --dataset or set \"dataset\" in the config"))
}

fn prepare(cfg: &RunConfig, manifest: &Path) -> Result<PreparedDataset, CliError> {
    let (m, trials) = load_dataset(manifest)?;
    Ok(PreparedDataset::from_trials(m.classes, &trials, &cfg.data)?)
}

fn csv_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_cv_outputs(out: &Path, suite: &str, rows: &[(String, &CvResult)]) -> Result<(), CliError> {
    let prefix = if suite == "cv" { String::new() } else { format!("{suite}_") };
    csv_file(&out.join(format!("{prefix}results.csv")), |w| write_results_csv(w, suite, rows))?;
    csv_file(&out.join(format!("{prefix}aggregate.csv")), |w| write_aggregate_csv(w, suite, rows))?;
    let logs = out.join("logs");
    create_out(&logs)?;
    for (variant, res) in rows {
        for e in &res.entries {
            let name = format!("{prefix}{}_r{}_f{}.csv", variant.replace(['=', '+'], "_"), e.repeat, e.fold);
            csv_file(&logs.join(name), |w| write_training_log(w, &e.log))?;
        }
    }
    Ok(())
}

fn check_finite(res: &CvResult) -> Result<(), CliError> {
    if [res.acc.mean, res.bca.mean, res.weighted_f1.mean].iter().any(|v| !v.is_finite()) {
        return Err(CliError::new(EXIT_NUMERIC, "non-finite aggregate metric"));
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    describe_run(&RunConfig { dataset: None, ..cfg.clone() }, &common.out)?;
    let path = write_synth_dataset(&cfg.synth, &common.out)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_preprocess(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let manifest = require_dataset(&cfg, &common.out)?;
    let (m, trials) = load_dataset(&manifest)?;
    let dir = common.out.join("trials");
    create_out(&dir)?;
    let mut entries = Vec::with_capacity(trials.len());
    for (i, t) in trials.iter().enumerate() {
        let clean = preprocess_trial(t, &cfg.data.preprocess)?;
        let rel = format!("trials/{i:05}.eegt");
        write_trial_binary(&common.out.join(&rel), &clean.samples)?;
        entries.push(ManifestEntry {
            path: rel,
            patient: clean.patient_id.clone(),
            label: ManifestLabel::Index(clean.label),
            rate_hz: clean.sample_rate_hz,
        });
    }
    let out_manifest = DatasetManifest { format_version: MANIFEST_VERSION, classes: m.classes, channels: m.channels, trials: entries };
    write_manifest(&common.out.join("manifest.json"), &out_manifest)?;
    println!("{} trials -> {}", trials.len(), common.out.join("manifest.json").display());
    Ok(())
}

fn cmd_decompose(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let manifest = require_dataset(&cfg, &common.out)?;
    let grouping = band_grouping_preset(cfg.data.branches)?;
    let (_, trials) = load_dataset(&manifest)?;
    let dir = common.out.join("bands");
    create_out(&dir)?;
    let mut index = String::from("window,patient,label,band,path,energy\n");
    let mut count = 0usize;
    for t in &trials {
        let clean = preprocess_trial(t, &cfg.data.preprocess)?;
        for w in segment(&clean, cfg.data.window_seconds, cfg.data.overlap)? {
            let set = decompose_bands(&w, &grouping)?;
            for (name, sig) in set.names.iter().zip(&set.signals) {
                let rel = format!("bands/{count:06}_{name}.eegt");
                write_trial_binary(&common.out.join(&rel), sig)?;
                let energy: f64 = sig.data().iter().map(|v| v * v).sum();
                index.push_str(&format!("{},{},{},{name},{rel},{energy}\n", set.window_id, w.patient_id, w.label));
            }
            count += 1;
        }
    }
    fs::write(common.out.join("bands.csv"), index)?;
    println!("{count} windows decomposed into {} bands", grouping.num_branches());
    Ok(())
}

fn run_train<F: Scalar>(cfg: &RunConfig, data: &PreparedDataset, out: &Path) -> Result<(), CliError> {
    let tc = cfg.train.fitted_to(data);
    let (tr_p, val_p) = crate::data::split_validation(&data.patients(), tc.val_fraction, tc.seed);
    let outcome = train::<F>(&data.select(&tr_p), &data.select(&val_p), &tc)?;
    save_checkpoint(&outcome.model, &out.join("model.mbmd"))?;
    csv_file(&out.join("train_log.csv"), |w| write_training_log(w, &outcome.log))?;
    println!("trained {} epochs (best {} with monitored loss {:.6})", outcome.log.len(), outcome.best_epoch, outcome.best_loss);
    Ok(())
}

fn cmd_train(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let manifest = require_dataset(&cfg, &common.out)?;
    let data = prepare(&cfg, &manifest)?;
    if verify_mode() {
        run_train::<f64>(&cfg, &data, &common.out)
    } else {
        run_train::<f32>(&cfg, &data, &common.out)
    }
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let manifest = require_dataset(&cfg, &common.out)?;
    let data = prepare(&cfg, &manifest)?;
    let all: Vec<_> = data.samples.iter().collect();
    let report = if verify_mode() {
        evaluate(&load_checkpoint::<f64>(checkpoint)?, &all)?
    } else {
        evaluate(&load_checkpoint::<f32>(checkpoint)?, &all)?
    };
    write_json(&common.out.join("metrics.json"), &report)?;
    println!("acc {:.4} bca {:.4} weighted_f1 {:.4}", report.acc, report.bca, report.weighted_f1);
    Ok(())
}

fn cmd_cv(common: &Common, jobs: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(j) = jobs {
        cfg.cv.jobs = j;
    }
    let manifest = require_dataset(&cfg, &common.out)?;
    let data = prepare(&cfg, &manifest)?;
    let res =
        if verify_mode() { cross_validate::<f64>(&data, &cfg.train, &cfg.cv)? } else { cross_validate::<f32>(&data, &cfg.train, &cfg.cv)? };
    check_finite(&res)?;
    write_cv_outputs(&common.out, "cv", &[("mbmd".to_string(), &res)])?;
    println!("bca {:.4} +- {:.4} over {} runs", res.bca.mean, res.bca.std, res.entries.len());
    Ok(())
}

fn cmd_ablate(common: &Common, suite: Option<&str>, jobs: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(j) = jobs {
        cfg.cv.jobs = j;
    }
    if let Some(s) = suite {
        cfg.suite = Some(s.to_string());
    }
    let suites: Vec<Suite> = match cfg.suite.as_deref() {
        None | Some("all") => Suite::ALL.to_vec(),
        Some(s) => vec![s.parse().map_err(|e: TrainError| CliError::config(e.to_string()))?],
    };
    let manifest = require_dataset(&cfg, &common.out)?;
    let data = prepare(&cfg, &manifest)?;
    for s in suites {
        let rows = if verify_mode() {
            ablation_suite::<f64>(s, &data, &cfg.train, &cfg.cv)?
        } else {
            ablation_suite::<f32>(s, &data, &cfg.train, &cfg.cv)?
        };
        for r in &rows {
            check_finite(&r.result)?;
            println!("{s} {}: bca {:.4} +- {:.4}", r.variant, r.result.bca.mean, r.result.bca.std);
        }
        let named: Vec<(String, &CvResult)> = rows.iter().map(|r| (r.variant.clone(), &r.result)).collect();
        write_cv_outputs(&common.out, s.name(), &named)?;
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    describe_run(&cfg, &common.out)?;
    let rows = gradcheck_suite(cfg.train.seed)?;
    let mut text = String::from("check,max_rel_err,passed\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.name, r.max_rel_err, r.passed));
    }
    fs::write(common.out.join("gradcheck.csv"), text)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::new(EXIT_NUMERIC, format!("gradient check failed: {}", failed.join(", "))));
    }
    println!("{} checks passed", rows.len());
    Ok(())
}

fn cmd_report(results: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let out = out.unwrap_or(results);
    let written = render_report(results, out).map_err(|e| match e {
        ReportError::Io(io) => CliError::new(EXIT_DATA, io.to_string()),
        other => CliError::new(EXIT_DATA, other.to_string()),
    })?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(j) = cli.jobs {
        // a second initialisation (tests calling `run` repeatedly) is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Preprocess(c) => cmd_preprocess(c),
        Command::Decompose(c) => cmd_decompose(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Cv(c) => cmd_cv(c, cli.jobs),
        Command::Ablate { common, suite } => cmd_ablate(common, suite.as_deref(), cli.jobs),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Report { results, out } => cmd_report(results, out.as_deref()),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"batch": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let ok: RunConfig = serde_json::from_str(r#"{"train": {"batch_size": 8}}"#).unwrap();
        assert_eq!(ok.train.batch_size, 8);
        assert_eq!(ok.train.learning_rate, 1e-3);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["mbmd", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mbmd", "cv", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["mbmd", "--help"]), EXIT_OK);
    }

    #[test]
    fn content_hash_matches_git_blob_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"hello\n").unwrap();
        // printf 'blob 6\0hello\n' | sha256sum
        assert_eq!(content_hash(&p).unwrap(), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }
}
