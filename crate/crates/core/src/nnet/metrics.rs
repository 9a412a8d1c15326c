use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnomalyClass, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: AnomalyClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Classification report. Confusion rows are truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub support: usize,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[usize; NUM_CLASSES]; NUM_CLASSES]) -> Result<Self> {
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("cannot score an empty prediction set"));
        }
        let mut per_class = Vec::with_capacity(NUM_CLASSES);
        let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
        for c in 0..NUM_CLASSES {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let share = support as f64 / total as f64;
            wp += share * precision;
            wr += share * recall;
            wf += share * f1;
            per_class.push(ClassMetrics {
                class: AnomalyClass::ALL[c],
                precision,
                recall,
                f1,
                support,
            });
        }
        let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        Ok(MetricsReport {
            per_class,
            weighted_precision: wp,
            weighted_recall: wr,
            weighted_f1: wf,
            accuracy: ratio(correct, total),
            support: total,
            confusion,
        })
    }

    /// Aligned plain-text table: one row per class plus a weighted summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>8} {:>9} {:>8}", "Class", "WP", "WR", "WF1", "Accuracy", "Support");
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<22} {:>7.2}% {:>7.2}% {:>7.2}% {:>9} {:>8}",
                m.class.name(),
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                "",
                m.support
            );
        }
        let _ = writeln!(
            s,
            "{:<22} {:>7.2}% {:>7.2}% {:>7.2}% {:>8.2}% {:>8}",
            "weighted",
            100.0 * self.weighted_precision,
            100.0 * self.weighted_recall,
            100.0 * self.weighted_f1,
            100.0 * self.accuracy,
            self.support
        );
        s
    }
}

/// Scores predicted labels against ground truth.
pub fn evaluate_predictions(truth: &[AnomalyClass], predicted: &[AnomalyClass]) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} truth labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    MetricsReport::from_confusion(confusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{class_counts_for, default_class_fractions};

    fn labels(idx: &[usize]) -> Vec<AnomalyClass> {
        idx.iter().map(|&i| AnomalyClass::ALL[i]).collect()
    }

    #[test]
    fn perfect_predictions() {
        let t = labels(&[0, 1, 2, 3, 4, 0, 0]);
        let r = evaluate_predictions(&t, &t).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for v in [r.weighted_precision, r.weighted_recall, r.weighted_f1] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(r.to_table().contains("100.00%"));
    }

    #[test]
    fn majority_class_on_default_fractions() {
        let counts = class_counts_for(100_000, &default_class_fractions());
        let mut truth = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            truth.extend(std::iter::repeat_n(AnomalyClass::ALL[c], n));
        }
        let pred = vec![AnomalyClass::NoAnomaly; truth.len()];
        let r = evaluate_predictions(&truth, &pred).unwrap();
        assert!((r.accuracy - 0.6426).abs() < 1e-3, "{}", r.accuracy);
        // Classes never predicted score precision 0.
        for m in &r.per_class[1..] {
            assert_eq!(m.precision, 0.0);
            assert_eq!(m.f1, 0.0);
        }
        assert!((r.weighted_recall - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_fixture() {
        // Truth rows, prediction columns.
        let cm = [
            [5, 1, 0, 0, 0],
            [2, 3, 0, 0, 1],
            [0, 0, 4, 0, 0],
            [0, 0, 1, 0, 0],
            [0, 0, 0, 0, 2],
        ];
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert_eq!(r.support, 19);
        let p = [5.0 / 7.0, 3.0 / 4.0, 4.0 / 5.0, 0.0, 2.0 / 3.0];
        let rc = [5.0 / 6.0, 3.0 / 6.0, 1.0, 0.0, 1.0];
        let sup = [6.0, 6.0, 4.0, 1.0, 2.0];
        let mut wp = 0.0;
        let mut wr = 0.0;
        let mut wf = 0.0;
        for c in 0..5 {
            let f = if p[c] + rc[c] > 0.0 { 2.0 * p[c] * rc[c] / (p[c] + rc[c]) } else { 0.0 };
            assert!((r.per_class[c].precision - p[c]).abs() < 1e-12);
            assert!((r.per_class[c].recall - rc[c]).abs() < 1e-12);
            assert!((r.per_class[c].f1 - f).abs() < 1e-12);
            wp += sup[c] * p[c] / 19.0;
            wr += sup[c] * rc[c] / 19.0;
            wf += sup[c] * f / 19.0;
        }
        assert!((r.weighted_precision - wp).abs() < 1e-12);
        assert!((r.weighted_recall - wr).abs() < 1e-12);
        assert!((r.weighted_f1 - wf).abs() < 1e-12);
        assert!((r.accuracy - 14.0 / 19.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(evaluate_predictions(&[], &[]).is_err());
        assert!(evaluate_predictions(&labels(&[0]), &labels(&[0, 1])).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = labels(&[0, 1, 1, 4]);
        let p = labels(&[0, 1, 0, 4]);
        let r = evaluate_predictions(&t, &p).unwrap();
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(r, back);
    }
}
