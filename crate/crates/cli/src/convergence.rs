//! Accuracy-at-epoch comparison across run reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vitstem::train::RunReport;

use crate::sweep::Cell;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    /// One column per report.
    pub columns: Vec<String>,
    /// Epochs present in every report, then the final row.
    pub epochs: Vec<usize>,
    /// `cells[row][column]`; the last row is the final accuracy.
    pub cells: Vec<Vec<Cell>>,
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a run report", path.display()))
}

fn column_name(path: &Path, report: &RunReport) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{stem} [{} lr={}]", report.model.stem, report.train.lr)
}

/// Rows for each requested epoch that every report scheduled; a report that
/// diverged earlier shows `crash` there.
pub fn convergence(reports: &[(String, RunReport)], epochs: &[usize]) -> Result<ConvergenceTable> {
    if reports.len() < 2 {
        bail!("convergence needs at least two reports, got {}", reports.len());
    }
    let common: Vec<usize> = epochs
        .iter()
        .copied()
        .filter(|&e| e >= 1 && reports.iter().all(|(_, r)| e <= r.train.total_epochs))
        .collect();
    if common.is_empty() {
        let totals: Vec<usize> = reports.iter().map(|(_, r)| r.train.total_epochs).collect();
        bail!("none of the epochs {epochs:?} is scheduled by every report (epoch counts {totals:?})");
    }
    let cell = |r: &RunReport, e: usize| match r.acc_at(e) {
        Some(v) => Cell::Acc(v),
        None if r.diverged => Cell::Crash,
        None => Cell::Missing,
    };
    let mut cells: Vec<Vec<Cell>> = common
        .iter()
        .map(|&e| reports.iter().map(|(_, r)| cell(r, e)).collect())
        .collect();
    cells.push(
        reports
            .iter()
            .map(|(_, r)| match r.final_top1 {
                Some(v) => Cell::Acc(v),
                None if r.diverged => Cell::Crash,
                None => Cell::Missing,
            })
            .collect(),
    );
    Ok(ConvergenceTable {
        columns: reports.iter().map(|(n, _)| n.clone()).collect(),
        epochs: common,
        cells,
    })
}

pub fn convergence_from_files(paths: &[PathBuf], epochs: &[usize]) -> Result<ConvergenceTable> {
    let reports = paths
        .iter()
        .map(|p| load_report(p).map(|r| (column_name(p, &r), r)))
        .collect::<Result<Vec<_>>>()?;
    convergence(&reports, epochs)
}

impl ConvergenceTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        let labels = self.epochs.iter().map(|e| e.to_string()).chain(["final".to_string()]);
        for (label, row) in labels.zip(&self.cells) {
            let mut rec = vec![label];
            rec.extend(row.iter().map(Cell::render));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}
