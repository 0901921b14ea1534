//! Soft voting over per-model class-probability matrices.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-sum tolerance for a valid probability row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Per-sample class probabilities of one model, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub model_id: String,
    pub sample_ids: Vec<String>,
    pub true_labels: Vec<usize>,
    classes: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    /// Builds a matrix from row-major `values` and checks every row.
    pub fn new(
        model_id: impl Into<String>,
        sample_ids: Vec<String>,
        true_labels: Vec<usize>,
        classes: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if sample_ids.len() != true_labels.len() {
            return Err(Error::LengthMismatch {
                left: sample_ids.len(),
                right: true_labels.len(),
            });
        }
        if classes == 0 || values.len() != sample_ids.len() * classes {
            return Err(Error::InvalidProbabilities(format!(
                "{} values for {} samples of {classes} classes",
                values.len(),
                sample_ids.len()
            )));
        }
        let m = Self {
            model_id: model_id.into(),
            sample_ids,
            true_labels,
            classes,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::InvalidProbabilities(format!(
                    "row {i} ({}) has entries outside [0, 1]",
                    self.sample_ids[i]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidProbabilities(format!(
                    "row {i} ({}) sums to {sum}",
                    self.sample_ids[i]
                )));
            }
        }
        for &l in &self.true_labels {
            if l >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.classes,
                    line: None,
                });
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.classes)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Writes `sample_id,true_label,p_0,...` with 9 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fail = |e: &dyn std::fmt::Display| Error::WriteFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
        let mut header = vec!["sample_id".to_string(), "true_label".to_string()];
        header.extend((0..self.classes).map(|j| format!("p_{j}")));
        w.write_record(&header).map_err(|e| fail(&e))?;
        for (i, row) in self.rows().enumerate() {
            let mut rec = vec![self.sample_ids[i].clone(), self.true_labels[i].to_string()];
            rec.extend(row.iter().map(|&p| format_significant(p, 9)));
            w.write_record(&rec).map_err(|e| fail(&e))?;
        }
        w.flush().map_err(|e| fail(&e))?;
        Ok(())
    }

    /// Reads a matrix written by [`ProbMatrix::write_csv`]; the model id is
    /// the file stem.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |line: usize, content: String| Error::MalformedLine { line, content };
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let header = r.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        let classes = header.len().saturating_sub(2);
        let expected = (0..classes).all(|j| header.get(j + 2) == Some(format!("p_{j}").as_str()));
        if header.get(0) != Some("sample_id") || header.get(1) != Some("true_label") || !expected || classes == 0 {
            return Err(bad(1, header.iter().collect::<Vec<_>>().join(",")));
        }
        let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            let joined = || rec.iter().collect::<Vec<_>>().join(",");
            if rec.len() != classes + 2 {
                return Err(bad(line, joined()));
            }
            ids.push(rec[0].to_string());
            labels.push(rec[1].parse().map_err(|_| bad(line, joined()))?);
            for field in rec.iter().skip(2) {
                values.push(field.parse::<f64>().map_err(|_| bad(line, joined()))?);
            }
        }
        let model_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(model_id, ids, labels, classes, values)
    }
}

/// Formats `v` with `digits` significant digits in positional notation.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Equal-weight mean of the members' probabilities per sample and class.
///
/// Each entry is averaged over its sorted member values, so the result does
/// not depend on member order and m identical members reproduce the input
/// bit for bit.
pub fn soft_vote(members: &[ProbMatrix]) -> Result<ProbMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::MemberMismatch("no ensemble members".into()))?;
    for m in &members[1..] {
        if m.classes != first.classes {
            return Err(Error::MemberMismatch(format!(
                "{} has {} classes, {} has {}",
                m.model_id, m.classes, first.model_id, first.classes
            )));
        }
        if m.sample_ids != first.sample_ids {
            return Err(Error::MemberMismatch(format!(
                "{} and {} list different samples",
                m.model_id, first.model_id
            )));
        }
    }
    let count = members.len() as f64;
    let mut entry = Vec::with_capacity(members.len());
    let values = (0..first.values.len())
        .map(|k| {
            entry.clear();
            entry.extend(members.iter().map(|m| m.values[k]));
            entry.sort_by(f64::total_cmp);
            let base = entry[0];
            base + entry[1..].iter().map(|v| v - base).sum::<f64>() / count
        })
        .collect();
    let id = members.iter().map(|m| m.model_id.as_str()).collect::<Vec<_>>().join("+");
    ProbMatrix::new(
        id,
        first.sample_ids.clone(),
        first.true_labels.clone(),
        first.classes,
        values,
    )
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted class per sample.
pub fn decide(probs: &ProbMatrix) -> Vec<usize> {
    probs.rows().map(argmax).collect()
}
