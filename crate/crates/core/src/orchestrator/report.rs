//! Per-iteration summary of a workspace's loop history.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::fsutil;
use crate::workspace::{IterationRecord, WorkspaceManifest};

use super::LoopError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub iteration: u32,
    /// Original (non-augmented) images in the train pool.
    pub train_size: usize,
    /// Including augmented copies.
    pub train_size_total: usize,
    pub best_f1: Option<f64>,
    pub best_f1_confidence: Option<f64>,
    pub map50: Option<f64>,
    pub map90: Option<f64>,
    pub labor_total: Option<f64>,
    pub labor_per_image: Option<f64>,
    pub labor_ratio: Option<f64>,
    pub baseline: bool,
}

impl From<&IterationRecord> for ReportRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.index,
            train_size: r.train_size_original,
            train_size_total: r.train_size_total,
            best_f1: r.eval.as_ref().map(|e| e.best_f1),
            best_f1_confidence: r.eval.as_ref().map(|e| e.best_f1_confidence),
            map50: r.eval.as_ref().map(|e| e.map_50),
            map90: r.eval.as_ref().map(|e| e.map_90),
            labor_total: r.labor.as_ref().map(|l| l.total_cost),
            labor_per_image: r.labor.as_ref().map(|l| l.per_image_cost),
            labor_ratio: r.labor.as_ref().map(|l| l.ratio_to_manual()),
            baseline: r.baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopReport {
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl LoopReport {
    pub fn from_manifest(m: &WorkspaceManifest) -> Result<Self, LoopError> {
        if m.iterations.is_empty() {
            return Err(LoopError::NoIterations);
        }
        Ok(Self {
            rows: m.iterations.iter().map(ReportRow::from).collect(),
        })
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "iteration,train_size,best_f1,map50,map90,labor_total,labor_per_image,baseline\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.train_size,
                cell(r.best_f1),
                cell(r.map50),
                cell(r.map90),
                cell(r.labor_total),
                cell(r.labor_per_image),
                r.baseline
            );
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>4} {:>7} {:>8} {:>8} {:>8} {:>10} {:>9} {:>7}\n",
            "iter", "train", "best_f1", "mAP50", "mAP90", "labor", "per_img", "manual%"
        );
        let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>4} {:>7} {:>8} {:>8} {:>8} {:>10} {:>9} {:>7}{}",
                r.iteration,
                r.train_size,
                opt(r.best_f1, 4),
                opt(r.map50, 4),
                opt(r.map90, 4),
                opt(r.labor_total, 1),
                opt(r.labor_per_image, 2),
                opt(r.labor_ratio.map(|x| 100.0 * x), 1),
                if r.baseline { "  (baseline)" } else { "" }
            );
        }
        out
    }
}

/// Writes `report.csv` and `report.txt` under `dir` and copies each
/// iteration's F1 curve to `f1_curve_iter_<i>.csv`.
pub fn write_report(ws_root: &Path, m: &WorkspaceManifest, dir: &Path) -> Result<LoopReport, LoopError> {
    let report = LoopReport::from_manifest(m)?;
    let err = |path: PathBuf| move |source| LoopError::Io { path, source };
    for (name, body) in [("report.csv", report.csv()), ("report.txt", report.table())] {
        let path = dir.join(name);
        fsutil::write_atomic(&path, body.as_bytes()).map_err(err(path.clone()))?;
    }
    for r in &m.iterations {
        let src = ws_root.join(format!("runs/iter_{}/f1_curve.csv", r.index));
        if src.is_file() {
            let dst = dir.join(format!("f1_curve_iter_{}.csv", r.index));
            let body = std::fs::read(&src).map_err(err(src.clone()))?;
            fsutil::write_atomic(&dst, &body).map_err(err(dst.clone()))?;
        }
    }
    Ok(report)
}
