//! Result files: results.csv, summary.json, weights.jsonl, config.txt.
//!
//! Values are exported as percentages with one decimal, matching the table
//! convention, and the summary statistics are computed from the exported
//! (rounded) values so they can be recomputed exactly from the CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use omsi_core::metrics::percent_value;
use omsi_core::{RunRecord, SampleSource};

#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub run_id: usize,
    pub avg_la: f64,
    pub final_ra: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub la_mean: f64,
    pub la_std: f64,
    pub ra_mean: f64,
    pub ra_std: f64,
    pub per_run: Vec<RunStats>,
}

/// One weights.jsonl line; field order is part of the format.
#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    experience: usize,
    weights_before: &'a [f64],
    weights_after: &'a [f64],
    noisy: &'a [bool],
    source: Vec<&'static str>,
    meta_loss: f64,
}

pub fn results_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("run_id,experience,la,ra\n");
    for (run_id, record) in records.iter().enumerate() {
        for m in &record.per_experience {
            writeln!(
                out,
                "{run_id},{},{:.1},{:.1}",
                m.experience,
                percent_value(m.la),
                percent_value(m.ra)
            )
            .unwrap();
        }
    }
    out
}

/// Mean and sample standard deviation (N-1 denominator; 0 for N = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize(records: &[RunRecord]) -> Summary {
    let per_run: Vec<RunStats> = records
        .iter()
        .enumerate()
        .map(|(run_id, record)| {
            let las: Vec<f64> = record
                .per_experience
                .iter()
                .map(|m| percent_value(m.la))
                .collect();
            let avg_la = las.iter().sum::<f64>() / las.len() as f64;
            let final_ra = record
                .per_experience
                .last()
                .map_or(0.0, |m| percent_value(m.ra));
            RunStats {
                run_id,
                avg_la,
                final_ra,
            }
        })
        .collect();
    let (la_mean, la_std) = mean_std(&per_run.iter().map(|r| r.avg_la).collect::<Vec<_>>());
    let (ra_mean, ra_std) = mean_std(&per_run.iter().map(|r| r.final_ra).collect::<Vec<_>>());
    Summary {
        runs: records.len(),
        la_mean,
        la_std,
        ra_mean,
        ra_std,
        per_run,
    }
}

pub fn weights_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for record in records {
        for trace in &record.step_traces {
            let line = TraceLine {
                step: trace.global_batch_index,
                experience: trace.experience,
                weights_before: &trace.weights_before,
                weights_after: &trace.weights_after,
                noisy: &trace.noisy,
                source: trace
                    .source_mask
                    .iter()
                    .map(|s| match s {
                        SampleSource::Stream => "stream",
                        SampleSource::Buffer => "buffer",
                    })
                    .collect(),
                meta_loss: trace.meta_loss,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes every output file for one experiment into its output directory.
pub fn write_run_outputs(
    dir: &Path,
    snapshot: &str,
    records: &[RunRecord],
    with_traces: bool,
) -> Result<Summary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), snapshot)?;
    fs::write(dir.join("results.csv"), results_csv(records))?;
    let summary = summarize(records);
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    if with_traces {
        fs::write(dir.join("weights.jsonl"), weights_jsonl(records)?)?;
    }
    Ok(summary)
}

pub fn sweep_csv(axis: &str, rows: &[(String, Summary)]) -> String {
    let mut out = format!("{axis},la_mean,la_std,ra_mean,ra_std\n");
    for (value, summary) in rows {
        writeln!(
            out,
            "{value},{},{},{},{}",
            summary.la_mean, summary.la_std, summary.ra_mean, summary.ra_std
        )
        .unwrap();
    }
    out
}
