//! Confusion-matrix metrics and the metrics CSV format.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Scores for one split at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: String,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub acc: f64,
    pub m_pre: f64,
    pub m_rec: f64,
    pub m_f1: f64,
    /// Recall of each class.
    pub per_class_acc: Vec<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Precision, recall or F1 with a zero denominator count as 0.
    pub fn from_confusion(epoch: usize, split: &str, confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("metrics", "confusion matrix must be square and non-empty"));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("metrics", format!("split {split:?} is empty")));
        }
        let diag = |c: usize| confusion[c][c];
        let row = |c: usize| confusion[c].iter().sum::<usize>();
        let col = |c: usize| confusion.iter().map(|r| r[c]).sum::<usize>();
        let recall: Vec<f64> = (0..k).map(|c| ratio(diag(c), row(c))).collect();
        let precision: Vec<f64> = (0..k).map(|c| ratio(diag(c), col(c))).collect();
        let f1: Vec<f64> = recall
            .iter()
            .zip(&precision)
            .map(|(&r, &p)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
        Ok(MetricsReport {
            epoch,
            split: split.to_string(),
            acc: ratio((0..k).map(diag).sum(), total),
            m_pre: mean(&precision),
            m_rec: mean(&recall),
            m_f1: mean(&f1),
            per_class_acc: recall,
            confusion,
        })
    }

    pub fn from_predictions(epoch: usize, split: &str, k: usize, labels: &[usize], preds: &[usize]) -> Result<Self> {
        let mut confusion = vec![vec![0; k]; k];
        for (&y, &p) in labels.iter().zip(preds) {
            if y >= k || p >= k {
                return Err(Error::invalid("metrics", format!("class id {} out of range", y.max(p))));
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(epoch, split, confusion)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("epoch,split,acc,m_pre,m_rec,m_f1");
        for k in 1..=num_classes {
            write!(h, ",acc_{k}").unwrap();
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, self.acc, self.m_pre, self.m_rec, self.m_f1
        );
        for a in &self.per_class_acc {
            write!(row, ",{a:.6}").unwrap();
        }
        row
    }
}

/// Header plus one line per report, newline-terminated.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let k = reports.first().map_or(3, |r| r.per_class_acc.len());
    let mut out = MetricsReport::csv_header(k);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal() {
        let m = MetricsReport::from_confusion(0, "test", vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]]).unwrap();
        assert_eq!((m.acc, m.m_pre, m.m_rec, m.m_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn csv_formatting() {
        let m = MetricsReport::from_confusion(3, "val", vec![vec![1, 1], vec![0, 2]]).unwrap();
        assert_eq!(MetricsReport::csv_header(2), "epoch,split,acc,m_pre,m_rec,m_f1,acc_1,acc_2");
        assert_eq!(m.csv_row(), "3,val,0.750000,0.833333,0.750000,0.733333,0.500000,1.000000");
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(MetricsReport::from_confusion(0, "test", vec![vec![0, 0], vec![0, 0]]).is_err());
    }
}
