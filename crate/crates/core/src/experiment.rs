//! Running configured experiments and persisting their outputs.
//!
//! A run writes, under the output directory:
//! - `metrics_<variant>.jsonl`: one `"kind":"round"` line per round and
//!   replicate, then one `"kind":"summary"` line. A file without a summary
//!   line is from an interrupted run; a failed run ends with `"kind":"error"`.
//! - `model_<variant>_r<i>.json`: the final global model of replicate `i`.
//! - `features_<variant>_r<i>.csv`: its eval-mode encodings of every domain.
//!
//! A sweep runs several variants from the same master seed and adds
//! `comparison.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate_synthetic_domains, load_manifest_datasets, DataError, DomainDataset, DomainRole};
use crate::federation::{Federation, FederationError, VariantTag};
use crate::metrics::{dump_features, MetricsError, RoundRecord};
use crate::nn::Model;
use crate::seeds::{derive_seed, Stream};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("dataset: {0}")]
    Layout(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("comparison table: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Sources, the unlabeled target training split and the labeled target test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Domains {
    pub sources: Vec<DomainDataset>,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
    pub classes: usize,
}

impl Domains {
    pub fn from_datasets(datasets: Vec<DomainDataset>) -> Result<Self, ExperimentError> {
        let mut sources = Vec::new();
        let (mut train, mut test) = (None, None);
        for d in datasets {
            match d.role {
                DomainRole::Source => sources.push(d),
                DomainRole::TargetTrain if train.is_none() => train = Some(d),
                DomainRole::TargetTest if test.is_none() => test = Some(d),
                r => return Err(ExperimentError::Layout(format!("more than one {} domain", r.as_str()))),
            }
        }
        if sources.is_empty() {
            return Err(ExperimentError::Layout("no source domains".into()));
        }
        let target_train = train.ok_or_else(|| ExperimentError::Layout("no target-train domain".into()))?;
        let target_test = test.ok_or_else(|| ExperimentError::Layout("no target-test domain".into()))?;
        let dim = target_test.dim();
        if sources.iter().chain([&target_train]).any(|d| d.dim() != dim) {
            return Err(ExperimentError::Layout("domains disagree on feature width".into()));
        }
        let classes = sources.iter().chain([&target_test]).filter_map(|d| d.max_label()).max().unwrap_or(0) + 1;
        if classes < 2 {
            return Err(ExperimentError::Layout("need at least two classes".into()));
        }
        Ok(Self { sources, target_train, target_test, classes })
    }

    pub fn dim(&self) -> usize {
        self.target_test.dim()
    }

    pub fn all(&self) -> Vec<DomainDataset> {
        let mut v = self.sources.clone();
        v.push(self.target_train.clone());
        v.push(self.target_test.clone());
        v
    }
}

/// Seed of replicate `i`; every stream of the replicate derives from it.
pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    derive_seed(master, Stream::Replicate, replicate as u64)
}

/// The domains of one replicate. Synthetic data is regenerated per replicate;
/// a manifest gives the same data to every replicate.
pub fn load_domains(cfg: &ExperimentConfig, replicate: usize) -> Result<Domains, ExperimentError> {
    let datasets = match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic_domains(spec, replicate_seed(cfg.seed, replicate))?,
        DataSource::Manifest(path) => load_manifest_datasets(path)?,
    };
    Domains::from_datasets(datasets)
}

pub fn build_federation(cfg: &ExperimentConfig, domains: Domains, replicate: usize) -> Result<Federation, ExperimentError> {
    let arch = cfg.arch(domains.dim(), domains.classes);
    Ok(Federation::new(
        arch,
        cfg.flags(),
        cfg.protocol,
        domains.sources,
        domains.target_train,
        domains.target_test,
        replicate_seed(cfg.seed, replicate),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub init_hash: String,
    pub max_tta: f64,
    pub final_tta: f64,
    /// Sum of the per-round group effect, when measured.
    pub sum_ge: Option<f64>,
}

/// Run every round of one replicate, handing each record to `sink`.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    replicate: usize,
    mut sink: impl FnMut(&RoundRecord) -> Result<(), ExperimentError>,
) -> Result<(ReplicateResult, Model, Domains), ExperimentError> {
    let domains = load_domains(cfg, replicate)?;
    let keep = domains.clone();
    let mut fed = build_federation(cfg, domains, replicate)?;
    let init_hash = fed.global.fingerprint();
    let mut max_tta = f64::NEG_INFINITY;
    let mut final_tta = f64::NAN;
    let mut sum_ge = cfg.protocol.group_effect.then_some(0.0);
    for _ in 0..cfg.protocol.rounds {
        let mut rec = fed.run_round()?;
        rec.replicate = replicate;
        max_tta = max_tta.max(rec.tta_global);
        final_tta = rec.tta_global;
        if let (Some(s), Some(ge)) = (sum_ge.as_mut(), rec.ge) {
            *s += ge;
        }
        sink(&rec)?;
    }
    Ok((ReplicateResult { replicate, init_hash, max_tta, final_tta, sum_ge }, fed.global, keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub replicates: usize,
    pub rounds: usize,
    pub max_tta: Vec<f64>,
    pub max_tta_mean: f64,
    /// Sample standard deviation (zero for a single replicate).
    pub max_tta_std: f64,
    pub final_tta: Vec<f64>,
    pub sum_ge: Vec<Option<f64>>,
    pub init_hash: Vec<String>,
}

impl RunSummary {
    pub fn from_results(variant: VariantTag, rounds: usize, results: &[ReplicateResult]) -> Self {
        let max_tta: Vec<f64> = results.iter().map(|r| r.max_tta).collect();
        let (mean, std) = mean_std(&max_tta);
        Self {
            variant: variant.to_string(),
            replicates: results.len(),
            rounds,
            max_tta,
            max_tta_mean: mean,
            max_tta_std: std,
            final_tta: results.iter().map(|r| r.final_tta).collect(),
            sum_ge: results.iter().map(|r| r.sum_ge).collect(),
            init_hash: results.iter().map(|r| r.init_hash.clone()).collect(),
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct Line<'a, T: Serialize> {
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct ErrorLine {
    message: String,
}

fn write_line<T: Serialize>(w: &mut impl Write, kind: &str, body: &T, path: &Path) -> Result<(), ExperimentError> {
    serde_json::to_writer(&mut *w, &Line { kind, body })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// File-name form of a variant tag: lowercase, `+` -> `_`.
pub fn variant_slug(tag: VariantTag) -> String {
    tag.as_str().to_ascii_lowercase().replace('+', "_")
}

pub fn metrics_path(dir: &Path, tag: VariantTag) -> PathBuf {
    dir.join(format!("metrics_{}.jsonl", variant_slug(tag)))
}

/// Run all replicates of `cfg.variant`, writing metrics, models and feature
/// dumps under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = metrics_path(dir, cfg.variant);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    match run_into(cfg, &mut w, &path) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            // best effort: the error is reported to the caller either way
            let _ = write_line(&mut w, "error", &ErrorLine { message: e.to_string() }, &path);
            Err(e)
        }
    }
}

fn run_into(cfg: &ExperimentConfig, w: &mut impl Write, path: &Path) -> Result<RunSummary, ExperimentError> {
    let slug = variant_slug(cfg.variant);
    let mut results = Vec::with_capacity(cfg.replicates);
    for rep in 0..cfg.replicates {
        let (result, model, domains) = run_replicate(cfg, rep, |rec| write_line(w, "round", rec, path))?;
        if cfg.save_models {
            let p = cfg.output_dir.join(format!("model_{slug}_r{rep}.json"));
            fs::write(&p, serde_json::to_vec(&model)?).map_err(io_err(&p))?;
        }
        if cfg.dump_features {
            let p = cfg.output_dir.join(format!("features_{slug}_r{rep}.csv"));
            dump_features(&model.encoder, &domains.all(), &p)?;
        }
        results.push(result);
    }
    let summary = RunSummary::from_results(cfg.variant, cfg.protocol.rounds, &results);
    write_line(w, "summary", &summary, path)?;
    Ok(summary)
}

/// Run each variant with the same master seed and write `comparison.csv`.
pub fn sweep(cfg: &ExperimentConfig, variants: &[VariantTag]) -> Result<Vec<RunSummary>, ExperimentError> {
    let mut summaries = Vec::with_capacity(variants.len());
    for &v in variants {
        let run = ExperimentConfig { variant: v, ..cfg.clone() };
        summaries.push(run_experiment(&run)?);
    }
    write_comparison(&summaries, &cfg.output_dir.join("comparison.csv"))?;
    Ok(summaries)
}

pub fn write_comparison(summaries: &[RunSummary], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "replicates", "max_tta_mean", "max_tta_std", "final_tta_mean", "sum_ge_mean"])?;
    for s in summaries {
        let ge: Vec<f64> = s.sum_ge.iter().flatten().copied().collect();
        let ge_mean = if ge.is_empty() { String::new() } else { mean_std(&ge).0.to_string() };
        w.write_record([
            s.variant.clone(),
            s.replicates.to_string(),
            s.max_tta_mean.to_string(),
            s.max_tta_std.to_string(),
            mean_std(&s.final_tta).0.to_string(),
            ge_mean,
        ])?;
    }
    w.flush().map_err(io_err(path))
}
