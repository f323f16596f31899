//! Evaluation tables: labeled rows of CP-WER / ORC-WER / SI-SDR with
//! improvement columns computed against the mixture row on the fly,
//! never stored.

use super::csvio::fmt_f64;
use super::ExperimentError;
use crate::metrics::EvalReport;

pub const MIXTURE_LABEL: &str = "mixture";
pub const ORACLE_LABEL: &str = "oracle";

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cp_wer: f64,
    pub orc_wer: f64,
    pub sisdr_db: f64,
}

impl TableRow {
    pub fn from_report(label: impl Into<String>, report: &EvalReport) -> Self {
        Self {
            label: label.into(),
            cp_wer: report.cp_wer(),
            orc_wer: report.orc_wer(),
            sisdr_db: report.mean_sisdr_db(),
        }
    }
}

/// Rows of one evaluation table. Always contains an oracle and a mixture
/// row; systems follow.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<TableRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: TableRow) {
        self.rows.push(row);
    }

    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn mixture(&self) -> Result<&TableRow, ExperimentError> {
        self.row(MIXTURE_LABEL)
            .ok_or_else(|| ExperimentError::Config("table has no mixture row".into()))
    }

    /// WER improvements of `row` over the mixture row (positive is
    /// better), in CP / ORC order.
    pub fn delta_over_mixture(&self, label: &str) -> Result<(f64, f64), ExperimentError> {
        let mixture = self.mixture()?;
        let row = self
            .row(label)
            .ok_or_else(|| ExperimentError::Config(format!("no table row {label:?}")))?;
        Ok((mixture.cp_wer - row.cp_wer, mixture.orc_wer - row.orc_wer))
    }

    /// Merge rows from another table, skipping labels already present
    /// (oracle and mixture rows are shared across system evaluations).
    pub fn merge(&mut self, other: &MetricsTable) {
        for row in &other.rows {
            if self.row(&row.label).is_none() {
                self.rows.push(row.clone());
            }
        }
    }

    pub fn header() -> [&'static str; 6] {
        ["label", "cp_wer", "d_cp_wer", "orc_wer", "d_orc_wer", "sisdr_db"]
    }

    pub fn csv_rows(&self) -> Result<Vec<Vec<String>>, ExperimentError> {
        let mixture = self.mixture()?.clone();
        Ok(self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    fmt_f64(r.cp_wer),
                    fmt_f64(mixture.cp_wer - r.cp_wer),
                    fmt_f64(r.orc_wer),
                    fmt_f64(mixture.orc_wer - r.orc_wer),
                    fmt_f64(r.sisdr_db),
                ]
            })
            .collect())
    }
}
