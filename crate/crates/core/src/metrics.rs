//! Target task accuracy, Group Effect, per-round records and feature dumps.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DomainDataset;
use crate::federation::ClientUpdate;
use crate::nn::{Mode, Model, ModelParams, NnError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    Empty,
    #[error("evaluation set has {found} labels for {expected} samples")]
    LabelCount { expected: usize, found: usize },
    #[error("evaluation set `{0}` has unlabeled rows")]
    Unlabeled(String),
    #[error("no client updates")]
    NoUpdates,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Fraction of rows whose eval-mode argmax equals the label.
pub fn tta(model: &Model, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, MetricsError> {
    if x.nrows() == 0 {
        return Err(MetricsError::Empty);
    }
    if labels.len() != x.nrows() {
        return Err(MetricsError::LabelCount { expected: x.nrows(), found: labels.len() });
    }
    let pred = model.predict(x)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn tta_on(model: &Model, set: &DomainDataset) -> Result<f64, MetricsError> {
    let labels = set.label_vec().ok_or_else(|| MetricsError::Unlabeled(set.domain_id.clone()))?;
    tta(model, set.x.view(), &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    /// TTA of `G_t + delta_k`, in update order.
    pub patched: Vec<f64>,
    /// TTA of the aggregate.
    pub aggregated: f64,
    pub value: f64,
}

/// `mean_k TTA(G_t + delta_k) - TTA(G_{t+1})`. Positive means aggregation
/// lost accuracy relative to the individually patched models.
pub fn group_effect_from(patched: &[f64], aggregated: f64) -> f64 {
    patched.iter().sum::<f64>() / patched.len() as f64 - aggregated
}

pub fn group_effect(
    global: &Model,
    updates: &[ClientUpdate],
    aggregated: &Model,
    test: &DomainDataset,
) -> Result<GroupEffect, MetricsError> {
    if updates.is_empty() {
        return Err(MetricsError::NoUpdates);
    }
    let mut patched = Vec::with_capacity(updates.len());
    for u in updates {
        let mut m = global.clone();
        m.add_scaled(&u.delta, 1.0)?;
        patched.push(tta_on(&m, test)?);
    }
    let agg = tta_on(aggregated, test)?;
    Ok(GroupEffect { value: group_effect_from(&patched, agg), patched, aggregated: agg })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub variant: String,
    pub replicate: usize,
    pub round: usize,
    /// TTA of the model delivered for the next round (after fine-tuning).
    pub tta_global: f64,
    /// TTA of the plain aggregate, before any fine-tuning.
    pub tta_aggregated: f64,
    pub tta_patched: Vec<f64>,
    pub ge: Option<f64>,
    pub j_cls: f64,
    pub j_dis: Option<f64>,
    pub j_mmd: Option<f64>,
    pub j_finetune: Option<f64>,
    pub lambda_p: f64,
    pub voted_samples: usize,
    pub vote_ties: usize,
    pub dis_packets: usize,
    pub mmd_packets: usize,
}

/// CSV with header `domain_id,label,h0..h{U-1}`; eval-mode encodings.
pub fn dump_features(encoder: &ModelParams, datasets: &[DomainDataset], path: &Path) -> Result<(), MetricsError> {
    let u = encoder.spec().output_dim();
    let mut out = String::from("domain_id,label");
    for j in 0..u {
        out.push_str(&format!(",h{j}"));
    }
    out.push('\n');
    for d in datasets {
        let (h, _) = encoder.forward(d.x.view(), Mode::Eval)?;
        for (row, label) in h.rows().into_iter().zip(&d.labels) {
            out.push_str(&d.domain_id);
            out.push(',');
            match label {
                Some(l) => out.push_str(&l.to_string()),
                None => out.push_str("-1"),
            }
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}
