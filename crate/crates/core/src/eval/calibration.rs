//! Accuracy, sequence confidence and binned expected calibration error.

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::config::ConfidenceMode;
use crate::error::{Error, Result};
use crate::types::{normalize_text, TaskKind};

pub const DEFAULT_BINS: usize = 10;

/// Normalised exact match: trim, lowercase, collapse whitespace.
pub fn labels_match(decoded: &str, gold: &str) -> bool {
    normalize_text(decoded) == normalize_text(gold)
}

fn predict_records(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    records.iter().filter(|r| r.task == TaskKind::Predict).collect()
}

/// Fraction of predict records whose decoded text matches the gold label.
pub fn label_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    let preds = predict_records(records);
    if preds.is_empty() {
        return Err(Error::invalid("accuracy over zero predict records"));
    }
    let hits = preds.iter().filter(|r| labels_match(&r.decoded, &r.gold)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Sequence confidence from the chosen-token probabilities of the label
/// tokens.
pub fn confidence(step_probs: &[f64], mode: ConfidenceMode) -> Result<f64> {
    if step_probs.is_empty() {
        return Err(Error::invalid("confidence of an empty decode"));
    }
    let n = step_probs.len() as f64;
    let c = match mode {
        ConfidenceMode::Mean => step_probs.iter().sum::<f64>() / n,
        ConfidenceMode::Geometric => (step_probs.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n).exp(),
        ConfidenceMode::First => step_probs[0],
    };
    Ok(c.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub avg_confidence: f64,
    pub accuracy: f64,
    pub n: usize,
    pub bins: Vec<CalibrationBin>,
    /// Dataset the records come from.
    pub dataset: Option<String>,
    /// Dataset the evaluated parameters were trained on.
    pub train_dataset: Option<String>,
    pub out_of_domain: bool,
}

/// Bin index for a confidence under right-inclusive edges `((b-1)/B, b/B]`,
/// with 0 folded into the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let c = confidence.clamp(0.0, 1.0);
    if c <= 0.0 {
        return 0;
    }
    let mut idx = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    // guard the float rounding of c * bins at the edges
    while idx > 0 && c <= idx as f64 / bins as f64 {
        idx -= 1;
    }
    while idx + 1 < bins && c > (idx + 1) as f64 / bins as f64 {
        idx += 1;
    }
    idx
}

/// `sum_b (n_b / N) |acc_b - conf_b|` over the bin table.
pub fn ece_from_bins(bins: &[CalibrationBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n as f64) * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Calibration over the predict records, each needing a confidence and a
/// correctness flag.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    let preds = predict_records(records);
    if preds.is_empty() {
        return Err(Error::invalid("ECE over zero predict records"));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut hit_sum = vec![0usize; bins];
    let mut total_conf = 0.0;
    let mut hits = 0usize;
    for r in &preds {
        let correct = r.correct.ok_or_else(|| Error::invalid(format!("record {} has no correctness", r.example_id)))?;
        let b = bin_index(r.confidence, bins);
        counts[b] += 1;
        conf_sum[b] += r.confidence;
        hit_sum[b] += correct as usize;
        total_conf += r.confidence;
        hits += correct as usize;
    }
    let table: Vec<CalibrationBin> = (0..bins)
        .map(|b| {
            let count = counts[b];
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count as f64, hit_sum[b] as f64 / count as f64)
            };
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    let n = preds.len();
    Ok(CalibrationReport {
        ece: ece_from_bins(&table),
        avg_confidence: total_conf / n as f64,
        accuracy: hits as f64 / n as f64,
        n,
        bins: table,
        dataset: None,
        train_dataset: None,
        out_of_domain: false,
    })
}
