//! Class-imbalance-aware evaluation metrics.
//!
//! Every class is weighted equally: precision and recall are computed per
//! class and averaged (macro), MF1 is the harmonic mean of the two macro
//! averages, and the geometric mean score (GM) is the C-th root of the
//! product of per-class sensitivities. A zero sensitivity would collapse GM
//! to zero, so it is replaced by [`GM_ZERO_SUBSTITUTE`] before the product.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Value that stands in for a per-class sensitivity of exactly zero in GM.
pub const GM_ZERO_SUBSTITUTE: f64 = 0.001;

/// Number of classes listed in [`MetricsReport::worst_k`].
pub const DEFAULT_WORST_K: usize = 10;

/// Per-class true positive, false positive and false negative counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    /// Number of samples.
    pub n: usize,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Total true positives, Σ TP_c.
    pub fn total_tp(&self) -> usize {
        self.tp.iter().sum()
    }

    /// Ground-truth support of class `c`, TP_c + FN_c.
    pub fn support(&self, c: usize) -> usize {
        self.tp[c] + self.fn_[c]
    }
}

/// Tallies per-class counts from aligned label sequences.
pub fn confusion(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<ConfusionCounts> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    let mut counts = ConfusionCounts {
        tp: vec![0; num_classes],
        fp: vec![0; num_classes],
        fn_: vec![0; num_classes],
        n: y_true.len(),
    };
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for &label in &[t, p] {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                    line: None,
                });
            }
        }
        if t == p {
            counts.tp[t] += 1;
        } else {
            counts.fn_[t] += 1;
            counts.fp[p] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Per-class sensitivity before zero substitution (equal to recall).
    pub sensitivity: Vec<f64>,
    pub mpre: f64,
    pub mrec: f64,
    pub mf1: f64,
    pub acc: f64,
    pub gm: f64,
    /// Lowest-recall classes, ascending, ties by class index.
    pub worst_k: Vec<(usize, f64)>,
}

impl MetricsReport {
    pub fn num_classes(&self) -> usize {
        self.recall.len()
    }

    /// Key-value text block, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in [
            ("Acc", self.acc),
            ("MPre", self.mpre),
            ("MRec", self.mrec),
            ("MF1", self.mf1),
            ("GM", self.gm),
        ] {
            let _ = writeln!(out, "{key} = {value:.6}");
        }
        let _ = writeln!(out, "classes = {}", self.num_classes());
        for (class, acc) in &self.worst_k {
            let _ = writeln!(out, "worst.{class} = {acc:.6}");
        }
        out
    }
}

/// Computes the macro metric suite from confusion counts.
///
/// Precision of a class that was never predicted is defined as 0. GM is
/// evaluated in the log domain so that many small sensitivities do not
/// underflow.
pub fn macro_report(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let c = counts.num_classes();
    if let Some(empty) = (0..c).find(|&k| counts.support(k) == 0) {
        return Err(Error::EmptyClass(empty));
    }
    let recall: Vec<f64> = (0..c)
        .map(|k| counts.tp[k] as f64 / counts.support(k) as f64)
        .collect();
    let precision: Vec<f64> = (0..c)
        .map(|k| {
            let predicted = counts.tp[k] + counts.fp[k];
            if predicted == 0 {
                0.0
            } else {
                counts.tp[k] as f64 / predicted as f64
            }
        })
        .collect();
    let mrec = recall.iter().sum::<f64>() / c as f64;
    let mpre = precision.iter().sum::<f64>() / c as f64;
    let mf1 = harmonic_mean(mpre, mrec);
    let acc = if counts.n == 0 {
        0.0
    } else {
        counts.total_tp() as f64 / counts.n as f64
    };
    let gm = geometric_mean_score(&recall);

    let mut report = MetricsReport {
        sensitivity: recall.clone(),
        precision,
        recall,
        mpre,
        mrec,
        mf1,
        acc,
        gm,
        worst_k: Vec::new(),
    };
    report.worst_k = worst_classes(&report, DEFAULT_WORST_K.min(c));
    Ok(report)
}

/// Convenience wrapper: labels straight to a report.
pub fn evaluate_labels(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<MetricsReport> {
    macro_report(&confusion(y_true, y_pred, num_classes)?)
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// GM over sensitivities, zero entries substituted, computed as
/// exp(mean(log S'_c)).
pub fn geometric_mean_score(sensitivity: &[f64]) -> f64 {
    if sensitivity.is_empty() {
        return 0.0;
    }
    let log_sum: f64 = sensitivity
        .iter()
        .map(|&s| if s == 0.0 { GM_ZERO_SUBSTITUTE } else { s }.ln())
        .sum();
    (log_sum / sensitivity.len() as f64).exp()
}

/// The `k` classes with the lowest per-class accuracy (recall), ascending,
/// ties broken by class index.
pub fn worst_classes(report: &MetricsReport, k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = report.recall.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_counts() {
        let c = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(c.tp, vec![1, 1, 1]);
        assert_eq!(c.fp, vec![0, 0, 0]);
        assert_eq!(c.fn_, vec![0, 0, 0]);
    }

    #[test]
    fn all_wrong_counts() {
        let c = confusion(&[0, 0], &[1, 1], 2).unwrap();
        assert_eq!(c.tp, vec![0, 0]);
        assert_eq!(c.fn_[0], 2);
        assert_eq!(c.fp[1], 2);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(
            confusion(&[0, 1], &[0], 2),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[0, 5], &[0, 1], 2),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn confusion_matches_pairwise_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 7;
        let t: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..c)).collect();
        let p: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..c)).collect();
        let counts = confusion(&t, &p, c).unwrap();
        for k in 0..c {
            let tp = t.iter().zip(&p).filter(|(a, b)| **a == k && **b == k).count();
            let fp = t.iter().zip(&p).filter(|(a, b)| **a != k && **b == k).count();
            let fn_ = t.iter().zip(&p).filter(|(a, b)| **a == k && **b != k).count();
            assert_eq!((counts.tp[k], counts.fp[k], counts.fn_[k]), (tp, fp, fn_));
        }
    }

    #[test]
    fn perfect_report_is_all_ones() {
        let r = evaluate_labels(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        for v in [r.acc, r.mpre, r.mrec, r.mf1, r.gm] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn gm_substitutes_zero_sensitivity() {
        // class 0 always right, class 1 always wrong
        let r = evaluate_labels(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(r.sensitivity, vec![1.0, 0.0]);
        assert!((r.gm - 0.001f64.sqrt()).abs() < 1e-12);
        assert!((r.gm - 0.031_622_776_601_683_79).abs() < 1e-12);
    }

    #[test]
    fn mf1_is_harmonic_mean() {
        assert!((harmonic_mean(0.6, 0.3) - 0.4).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn missing_ground_truth_class_is_rejected() {
        assert!(matches!(
            evaluate_labels(&[0, 0], &[0, 1], 2),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let r = evaluate_labels(&[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(r.precision, vec![0.5, 0.0]);
    }

    #[test]
    fn worst_classes_tie_rule_and_order() {
        let r = evaluate_labels(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap();
        assert_eq!(worst_classes(&r, 3), vec![(0, 1.0), (1, 1.0), (2, 1.0)]);

        let mut y_true = Vec::new();
        let mut y_pred = Vec::new();
        for class in 0..10 {
            for i in 0..6 {
                y_true.push(class);
                // class 7 gets 1 of 6 right
                let right = if class == 7 { i == 0 } else { i < 5 };
                y_pred.push(if right { class } else { (class + 1) % 10 });
            }
        }
        let r = evaluate_labels(&y_true, &y_pred, 10).unwrap();
        assert_eq!(r.worst_k[0].0, 7);
        assert!((r.worst_k[0].1 - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn worst_classes_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = rng.gen_range(2..12);
            let recall: Vec<f64> = (0..c).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
            let report = MetricsReport {
                precision: vec![0.0; c],
                sensitivity: recall.clone(),
                recall: recall.clone(),
                mpre: 0.0,
                mrec: 0.0,
                mf1: 0.0,
                acc: 0.0,
                gm: 0.0,
                worst_k: vec![],
            };
            let k = rng.gen_range(1..=c);
            let got = worst_classes(&report, k);
            // oracle: repeatedly pull the minimum (value, index)
            let mut remaining: Vec<(usize, f64)> = recall.iter().copied().enumerate().collect();
            let mut want = Vec::new();
            for _ in 0..k {
                let pos = (0..remaining.len())
                    .min_by(|&a, &b| {
                        remaining[a]
                            .1
                            .partial_cmp(&remaining[b].1)
                            .unwrap()
                            .then(remaining[a].0.cmp(&remaining[b].0))
                    })
                    .unwrap();
                want.push(remaining.remove(pos));
            }
            assert_eq!(got, want);
        }
    }
}
