//! Result files of a run.
//!
//! | file             | contents                                                       |
//! |------------------|----------------------------------------------------------------|
//! | `config.toml`    | resolved configuration                                         |
//! | `metrics.csv`    | `stage,average,mean_loss,lambda_last,lambda_max,` + metric columns |
//! | `lambda.csv`     | `stage,step,bank_distance,lambda`, one row per multiplier update |
//! | `traces.csv`     | `sequence,frame,label,score` for the exported test sequences    |
//! | `prototypes.csv` | `class_id,stage_of_birth,v_1..v_m`                              |
//! | `summary.json`   | hash, seed, version, summary metrics and timings               |
//!
//! Metric columns are `task_<j>` (accuracy on task `j`) for rotation streams
//! and `ap_<domain>` for highlight streams; cells not yet defined are empty.
//! Every table except `summary.json` is identical across reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::runner::experiment::{RunRecord, RunSummary};

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

pub fn metric_table(record: &RunRecord) -> String {
    let mut out = String::from("stage,average,mean_loss,lambda_last,lambda_max");
    for c in &record.metric_columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for s in &record.stages {
        let lambda = (s.lambda.updates > 0).then_some(s.lambda);
        let _ = write!(
            out,
            "{},{},{},{},{}",
            s.stage,
            s.average,
            s.mean_loss,
            cell(lambda.map(|l| l.last)),
            cell(lambda.map(|l| l.max))
        );
        for i in 0..record.metric_columns.len() {
            let v = if s.domain_ap.is_empty() {
                s.task_accuracy.get(i).copied()
            } else {
                s.domain_ap.get(i).and_then(|(_, ap)| *ap)
            };
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out
}

fn lambda_table(record: &RunRecord) -> String {
    let mut out = String::from("stage,step,bank_distance,lambda\n");
    for p in &record.lambda_trajectory {
        let _ = writeln!(out, "{},{},{},{}", p.stage, p.step, p.bank_distance, p.lambda);
    }
    out
}

fn trace_table(record: &RunRecord) -> String {
    let mut out = String::from("sequence,frame,label,score\n");
    for t in &record.traces {
        for (f, (s, l)) in t.scores.iter().zip(&t.labels).enumerate() {
            let _ = writeln!(out, "{},{f},{l},{s}", t.sequence);
        }
    }
    out
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config_hash: &'a str,
    seed: u64,
    code_version: &'a str,
    variant: String,
    stages: usize,
    stage_metrics: Vec<f64>,
    stage_seconds: Vec<f64>,
    summary: &'a RunSummary,
}

/// Writes the result files of `record` into `dir`, creating it if needed.
pub fn export_results(record: &RunRecord, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = SummaryFile {
        config_hash: &record.config_hash,
        seed: record.seed,
        code_version: &record.code_version,
        variant: record.config.run.variant.to_string(),
        stages: record.stages.len(),
        stage_metrics: record.stages.iter().map(|s| s.average).collect(),
        stage_seconds: record.stages.iter().map(|s| s.wall_seconds).collect(),
        summary: &record.summary,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invariant(e.to_string()))?;
    let prototypes = if record.prototypes.is_empty() {
        "# class_id,stage_of_birth,v_1..v_m\n".to_string()
    } else {
        record.prototypes.clone()
    };
    Ok(vec![
        write_file(dir, "config.toml", &record.config.to_text())?,
        write_file(dir, "metrics.csv", &metric_table(record))?,
        write_file(dir, "lambda.csv", &lambda_table(record))?,
        write_file(dir, "traces.csv", &trace_table(record))?,
        write_file(dir, "prototypes.csv", &prototypes)?,
        write_file(dir, "summary.json", &(json + "\n"))?,
    ])
}

/// Consolidated sweep table: `value,average_metric,final_metric,stage1_domains_final`.
pub fn sweep_table(axis: &str, values: &[f64], records: &[RunRecord]) -> String {
    let mut out = format!("{axis},average_metric,final_metric,stage1_domains_final\n");
    for (v, r) in values.iter().zip(records) {
        let _ = writeln!(
            out,
            "{v},{},{},{}",
            r.summary.average_metric,
            r.summary.final_metric,
            cell(r.summary.stage1_domains_final)
        );
    }
    out
}

/// Writes each run into `dir/<axis>_<value>` plus the consolidated table.
pub fn export_sweep(axis: &str, values: &[f64], records: &[RunRecord], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (v, r) in values.iter().zip(records) {
        export_results(r, dir.join(format!("{axis}_{v}")))?;
    }
    write_file(dir, "sweep.csv", &sweep_table(axis, values, records))
}

/// A parsed `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::ConfigParse {
                line: 1,
                message: "missing header".into(),
            })?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse().map(Some).map_err(|_| Error::ConfigParse {
                            line: i + 2,
                            message: format!("invalid number `{c}`"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                return Err(Error::ConfigParse {
                    line: i + 2,
                    message: format!("{} cells for {} columns", row.len(), header.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let c = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    /// Mean of the final row's `task_*` cells.
    pub fn average_accuracy(&self) -> Option<f64> {
        let last = self.rows.last()?;
        let cells: Vec<f64> = self
            .header
            .iter()
            .zip(last)
            .filter(|(h, _)| h.starts_with("task_"))
            .map(|(_, v)| *v)
            .collect::<Option<Vec<f64>>>()?;
        if cells.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for v in &cells {
            sum += v;
        }
        Some(sum / cells.len() as f64)
    }

    /// Mean of the `average` column over stages.
    pub fn stage_mean(&self) -> Option<f64> {
        let col = self.column("average")?.into_iter().collect::<Option<Vec<f64>>>()?;
        (!col.is_empty()).then(|| col.iter().sum::<f64>() / col.len() as f64)
    }
}

pub fn read_metric_table(path: impl AsRef<Path>) -> Result<MetricTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricTable::parse(&text)
}
