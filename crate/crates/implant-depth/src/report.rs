//! Evaluation reports: a human-readable text table plus a JSON summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use implant_depth_core::metrics::EvalResult;
use implant_depth_core::pipeline::Prediction;
use implant_depth_core::PatientRecord;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};

pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub id: String,
    pub iou: f64,
    pub safety_ok: Option<bool>,
    pub error: Option<String>,
    pub prediction: Option<Prediction>,
    pub ground_truth: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub patients: usize,
    pub failures: usize,
    pub mean_iou: f64,
    /// `(m, Acc(R@1, IoU = m))` in percent.
    pub acc: Vec<(f64, f64)>,
    pub oracle_position: bool,
    pub rows: Vec<PatientRow>,
}

impl EvalSummary {
    /// Rows follow the result's id order; predictions are matched by id.
    pub fn new(result: &EvalResult, records: &[PatientRecord], predictions: &[implant_depth_core::Result<Prediction>], oracle_position: bool) -> Self {
        let rows: Vec<PatientRow> = result
            .per_patient
            .iter()
            .map(|s| {
                let at = records.iter().position(|r| r.id == s.id).expect("scores come from these records");
                let gt = records[at].annotation.interval;
                PatientRow {
                    id: s.id.clone(),
                    iou: s.iou,
                    safety_ok: s.safety_ok,
                    error: s.error.clone(),
                    prediction: predictions[at].as_ref().ok().cloned(),
                    ground_truth: (gt.start, gt.end),
                }
            })
            .collect();
        let n = rows.len();
        EvalSummary {
            patients: n,
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            mean_iou: rows.iter().map(|r| r.iou).sum::<f64>() / n.max(1) as f64,
            acc: result.acc_at.clone(),
            oracle_position,
            rows,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mode = if self.oracle_position { "annotated positions" } else { "detected positions" };
        let _ = writeln!(s, "patients: {} ({} failed), crops at {mode}", self.patients, self.failures);
        let _ = writeln!(s, "mean IoU: {:.4}", self.mean_iou);
        for (m, a) in &self.acc {
            let _ = writeln!(s, "Acc(R@1, IoU={m}): {a:.1}%");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>8} {:>17} {:>17} {:>7}", "id", "IoU", "predicted", "annotated", "safe");
        for r in &self.rows {
            let pred = r.prediction.as_ref().map_or_else(|| "-".to_string(), |p| format!("{:.1}..{:.1}", p.interval.start, p.interval.end));
            let safe = match r.safety_ok {
                Some(true) => "yes",
                Some(false) => "no",
                None => "n/a",
            };
            let _ = write!(s, "{:<16} {:>8.4} {:>17} {:>17} {:>7}", r.id, r.iou, pred, format!("{:.1}..{:.1}", r.ground_truth.0, r.ground_truth.1), safe);
            if let Some(e) = &r.error {
                let _ = write!(s, "  error: {e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let report = dir.join(REPORT_FILE);
        fs::write(&report, self.render()).at(&report)?;
        let summary = dir.join(SUMMARY_FILE);
        fs::write(&summary, serde_json::to_string_pretty(self).expect("summary is plain data")).at(&summary)
    }
}
