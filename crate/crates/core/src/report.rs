//! Append-only results ledger and comparison tables.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{worst_classes, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub timestamp: String,
    pub dataset: String,
    pub model: String,
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "MPre")]
    pub mpre: f64,
    #[serde(rename = "MRec")]
    pub mrec: f64,
    #[serde(rename = "MF1")]
    pub mf1: f64,
    #[serde(rename = "GM")]
    pub gm: f64,
    pub config_hash: String,
}

impl LedgerRow {
    pub fn from_report(timestamp: String, dataset: &str, model: &str, report: &MetricsReport, config_hash: String) -> Self {
        Self {
            timestamp,
            dataset: dataset.to_string(),
            model: model.to_string(),
            acc: report.acc,
            mpre: report.mpre,
            mrec: report.mrec,
            mf1: report.mf1,
            gm: report.gm,
            config_hash,
        }
    }
}

/// Short SHA-256 of a config text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Appends one row, writing the header if the file is new or empty.
pub fn append_row(path: &Path, row: &LedgerRow) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| Error::WriteFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| fail(&e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row).map_err(|e| fail(&e))?;
    w.flush().map_err(|e| fail(&e))
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    if !path.exists() {
        return Err(Error::EmptyLedger(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    let rows = r
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::MalformedLine {
                line: i + 2,
                content: e.to_string(),
            })
        })
        .collect::<Result<Vec<LedgerRow>>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyLedger(path.to_path_buf()));
    }
    Ok(rows)
}

/// Rows of `dataset` (all rows when `None`), sorted by accuracy descending,
/// then model name, then timestamp.
pub fn select_rows(rows: &[LedgerRow], dataset: Option<&str>) -> Vec<LedgerRow> {
    let mut out: Vec<LedgerRow> = rows
        .iter()
        .filter(|r| dataset.map_or(true, |d| r.dataset == d))
        .cloned()
        .collect();
    out.sort_by(|a, b| {
        b.acc
            .total_cmp(&a.acc)
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.timestamp.cmp(&b.timestamp))
    });
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Comparison table, one line per row, metrics in percent.
pub fn comparison_table(rows: &[LedgerRow]) -> String {
    let mut s = format!(
        "{:<10} {:<24} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "dataset", "model", "Acc", "MPre", "MRec", "MF1", "GM"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<24} {:>7} {:>7} {:>7} {:>7} {:>7}",
            r.dataset,
            r.model,
            pct(r.acc),
            pct(r.mpre),
            pct(r.mrec),
            pct(r.mf1),
            pct(r.gm)
        );
    }
    s
}

/// The `k` classes with the lowest recall, with their names.
pub fn worst_table(report: &MetricsReport, names: &[String], k: usize) -> String {
    let mut s = format!("{:>5} {:<32} {:>8}\n", "rank", "class", "accuracy");
    for (rank, (c, recall)) in worst_classes(report, k).into_iter().enumerate() {
        let name = names.get(c).map(String::as_str).unwrap_or("?");
        let _ = writeln!(s, "{:>5} {:<32} {:>8}", rank + 1, format!("{c} {name}"), pct(recall));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, acc: f64) -> LedgerRow {
        LedgerRow {
            timestamp: "0".into(),
            dataset: "D0".into(),
            model: model.into(),
            acc,
            mpre: 0.5,
            mrec: 0.5,
            mf1: 0.5,
            gm: 0.4,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn ledger_append_and_sort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        assert!(matches!(read_ledger(&path), Err(Error::EmptyLedger(_))));
        let accs = [0.6, 0.7, 0.65, 0.72, 0.5];
        for (i, a) in accs.iter().enumerate() {
            append_row(&path, &row(&format!("m{i}"), *a)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "timestamp,dataset,model,Acc,MPre,MRec,MF1,GM,config_hash");
        assert_eq!(text.lines().count(), 6);
        let rows = select_rows(&read_ledger(&path).unwrap(), Some("D0"));
        let order: Vec<_> = rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(order, vec!["m3", "m1", "m2", "m0", "m4"]);
        assert_eq!(comparison_table(&rows), comparison_table(&rows));
        assert!(select_rows(&rows, Some("D1")).is_empty());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("a"), config_hash("a"));
        assert_ne!(config_hash("a"), config_hash("b"));
        assert_eq!(config_hash("a").len(), 16);
    }
}
