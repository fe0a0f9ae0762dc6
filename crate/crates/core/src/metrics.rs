//! Evaluation: accuracy, learning accuracy, retained accuracy, and the
//! per-run record.

use std::time::Duration;

use crate::error::{Error, Result};
use crate::nn::{mlp_forward, MlpParams};
use crate::rng::Seeds;
use crate::strategies::StepTrace;
use crate::streams::{Dataset, Experience};

/// Rows evaluated per forward pass during accuracy computation.
const EVAL_CHUNK: usize = 256;

/// Fraction of argmax predictions matching the labels. Ties break toward
/// the lowest class index.
pub fn accuracy(params: &MlpParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("empty dataset".to_string()));
    }
    let mut correct = 0usize;
    let mut offset = 0usize;
    while offset < dataset.len() {
        let end = (offset + EVAL_CHUNK).min(dataset.len());
        let idx: Vec<usize> = (offset..end).collect();
        let chunk = dataset.inputs.gather_rows(&idx);
        let (logits, _) = mlp_forward(params, &chunk)?;
        for (row, label) in idx.iter().map(|&i| dataset.labels[i]).enumerate() {
            let scores = logits.row(row);
            let mut best = 0usize;
            for (c, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        offset = end;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Test accuracy on one experience, measured right after training on it.
pub fn learning_accuracy(params: &MlpParams, experience: &Experience) -> Result<f64> {
    accuracy(params, &experience.test)
}

/// Unweighted mean of test accuracies over all experiences seen so far.
pub fn retained_accuracy(params: &MlpParams, experiences_seen: &[Experience]) -> Result<f64> {
    if experiences_seen.is_empty() {
        return Err(Error::Evaluation("no experiences seen".to_string()));
    }
    let mut sum = 0.0;
    for exp in experiences_seen {
        sum += accuracy(params, &exp.test)?;
    }
    Ok(sum / experiences_seen.len() as f64)
}

/// LA and RA after one experience.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceMetrics {
    pub experience: usize,
    pub la: f64,
    pub ra: f64,
}

/// Everything one training run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub per_experience: Vec<ExperienceMetrics>,
    /// Present only for traced OMSI runs.
    pub step_traces: Vec<StepTrace>,
    pub config_snapshot: String,
    pub seeds: Seeds,
    pub duration: Duration,
}

impl RunRecord {
    /// The paper-style "average learning accuracy": mean LA over the
    /// stream.
    pub fn average_la(&self) -> f64 {
        let n = self.per_experience.len();
        self.per_experience.iter().map(|m| m.la).sum::<f64>() / n as f64
    }

    /// Retained accuracy at the end of the stream.
    pub fn final_ra(&self) -> f64 {
        self.per_experience.last().map_or(0.0, |m| m.ra)
    }
}

/// Renders a fraction as a percentage with one decimal, the table format
/// used everywhere in the output files.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Percentage with one decimal as a number, for stats over exported rows.
pub fn percent_value(fraction: f64) -> f64 {
    (fraction * 1000.0).round() / 10.0
}
