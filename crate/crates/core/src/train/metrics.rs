//! Append-only metrics log, emitted as line-delimited JSON and CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, TrainError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Rows with monotonically non-decreasing step index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricRow) {
        if let Some(last) = self.rows.last() {
            debug_assert!(row.step >= last.step, "metrics steps must not decrease");
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.loss)
    }

    pub fn to_jsonl(&self) -> Result<String, TrainError> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,holdout_loss,task,accuracy\n");
        for r in &self.rows {
            let opt_f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.lr,
                opt_f(r.loss),
                opt_f(r.holdout_loss),
                r.task.clone().unwrap_or_default(),
                opt_f(r.accuracy),
            );
        }
        out
    }

    /// Write both formats next to each other in a run directory.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        let jsonl = dir.join("metrics.jsonl");
        std::fs::write(&jsonl, self.to_jsonl()?).map_err(|e| io_err(&jsonl, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| io_err(&csv, e))?;
        Ok(())
    }
}
