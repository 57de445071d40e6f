//! Row types of the emitted tables. CSV and JSON both print floats in
//! shortest round-trip form, so the two formats carry identical values.

use anyhow::Result;
use serde::{Deserialize, Serialize};
use step_mi::eval::{CalibrationBin, CalibrationReport, PredictionRecord};
use step_mi::eval::QualitySummary;
use step_mi::trainer::RunSummary;

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// `summary.json` of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset: String,
    pub variant: String,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Effective weight; zero for the `none` variant.
    pub alpha3: f64,
    pub vocab_size: usize,
    pub num_params: usize,
    pub run: RunSummary,
}

/// `report.json` of an evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_config_hash: String,
    pub calibration: CalibrationReport,
    pub quality: QualitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

pub fn bin_rows(bins: &[CalibrationBin]) -> Vec<BinRow> {
    bins.iter()
        .enumerate()
        .map(|(i, b)| BinRow {
            bin: i + 1,
            lower: b.lower,
            upper: b.upper,
            count: b.count,
            mean_confidence: b.mean_confidence,
            accuracy: b.accuracy,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub example_id: String,
    pub task: String,
    pub decoded: String,
    pub gold: String,
    pub correct: Option<bool>,
    pub confidence: f64,
    pub quality_score: Option<f64>,
    pub quality_error: Option<String>,
}

impl From<&PredictionRecord> for PredictionRow {
    fn from(r: &PredictionRecord) -> Self {
        PredictionRow {
            example_id: r.example_id.clone(),
            task: format!("{:?}", r.task).to_lowercase(),
            decoded: r.decoded.clone(),
            gold: r.gold.clone(),
            correct: r.correct,
            confidence: r.confidence,
            quality_score: r.quality_score,
            quality_error: r.quality_error.clone(),
        }
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub final_prediction_loss: f64,
    pub final_generation_loss: f64,
    pub final_mi_loss: f64,
    pub mean_mi_loss: f64,
    pub eval_dataset: String,
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub avg_confidence: f64,
    pub mean_quality: f64,
}

/// One row of the aggregated report; training and evaluation columns are
/// empty where the run did not produce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub command: String,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub dataset: Option<String>,
    pub train_dataset: Option<String>,
    pub out_of_domain: Option<bool>,
    pub steps: Option<usize>,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
    pub final_prediction_loss: Option<f64>,
    pub final_generation_loss: Option<f64>,
    pub final_mi_loss: Option<f64>,
    pub mean_mi_loss: Option<f64>,
    pub n: Option<usize>,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub avg_confidence: Option<f64>,
    pub mean_quality: Option<f64>,
    pub pearson: Option<f64>,
}

impl ReportRow {
    pub fn empty(run: &str, command: &str) -> Self {
        ReportRow {
            run: run.to_string(),
            command: command.to_string(),
            variant: None,
            seed: None,
            dataset: None,
            train_dataset: None,
            out_of_domain: None,
            steps: None,
            initial_total: None,
            final_total: None,
            final_prediction_loss: None,
            final_generation_loss: None,
            final_mi_loss: None,
            mean_mi_loss: None,
            n: None,
            accuracy: None,
            ece: None,
            avg_confidence: None,
            mean_quality: None,
            pearson: None,
        }
    }

    pub fn with_training(mut self, s: &TrainSummary) -> Self {
        self.variant = Some(s.variant.clone());
        self.dataset.get_or_insert_with(|| s.dataset.clone());
        self.steps = Some(s.run.steps);
        self.initial_total = s.run.initial.map(|b| b.total);
        self.final_total = s.run.last.map(|b| b.total);
        self.final_prediction_loss = s.run.last.map(|b| b.prediction_loss);
        self.final_generation_loss = s.run.last.map(|b| b.generation_loss);
        self.final_mi_loss = s.run.last.map(|b| b.mi_loss);
        self.mean_mi_loss = Some(s.run.mean_mi_loss);
        self
    }

    pub fn with_eval(mut self, r: &EvalReport) -> Self {
        let c = &r.calibration;
        self.dataset = c.dataset.clone();
        self.train_dataset = c.train_dataset.clone();
        self.out_of_domain = Some(c.out_of_domain);
        self.n = Some(c.n);
        self.accuracy = Some(c.accuracy);
        self.ece = Some(c.ece);
        self.avg_confidence = Some(c.avg_confidence);
        self.mean_quality = r.quality.mean_quality;
        self.pearson = r.quality.pearson;
        self
    }
}

/// Calibration bins tagged with the run they come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBinRow {
    pub run: String,
    pub variant: Option<String>,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: Vec<ReportRow>,
    pub bins: Vec<ReportBinRow>,
}
