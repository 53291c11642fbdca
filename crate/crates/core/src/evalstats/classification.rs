use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_lengths, StatsError};
use crate::tcrnet::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Option<Task>,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Intensity only.
    pub pearson: Option<f64>,
    pub per_class_f1: Vec<f64>,
    /// `confusion[gold][pred]`
    pub confusion: Vec<Vec<u64>>,
}

/// Accuracy, macro-F1 and support-weighted F1. A class with no support and
/// no predictions gets F1 = 0 and still counts toward the macro average.
pub fn classification_metrics(gold: &[usize], pred: &[usize], classes: usize) -> Result<MetricsReport, StatsError> {
    check_lengths(gold.len(), pred.len())?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        for v in [g, p] {
            if v >= classes {
                return Err(StatsError::ClassOutOfRange { value: v, classes });
            }
        }
        confusion[g][p] += 1;
    }
    let n = gold.len();
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_f1: Vec<f64> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let denom = (support + predicted) as f64;
            // F1 = 2TP / (2TP + FP + FN) = 2TP / (support + predicted)
            if denom == 0.0 { 0.0 } else { 2.0 * tp / denom }
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / classes as f64;
    let weighted_f1 = per_class_f1
        .iter()
        .enumerate()
        .map(|(c, f)| f * confusion[c].iter().sum::<u64>() as f64)
        .sum::<f64>()
        / n as f64;
    Ok(MetricsReport {
        task: None,
        n,
        accuracy: 100.0 * correct as f64 / n as f64,
        macro_f1: 100.0 * macro_f1,
        weighted_f1: 100.0 * weighted_f1,
        pearson: None,
        per_class_f1: per_class_f1.into_iter().map(|f| 100.0 * f).collect(),
        confusion,
    })
}

/// Sample Pearson correlation × 100.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_lengths(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(StatsError::TooFew("pearson needs at least two points".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(StatsError::DegenerateVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((100.0 * sxy / (sxx * syy).sqrt()).clamp(-100.0, 100.0))
}

/// Pearson on ordinal integer levels (e.g. intensity 1..=3).
pub fn pearson_ordinal(gold: &[u8], pred: &[u8]) -> Result<f64, StatsError> {
    let g: Vec<f64> = gold.iter().map(|&v| f64::from(v)).collect();
    let p: Vec<f64> = pred.iter().map(|&v| f64::from(v)).collect();
    pearson(&g, &p)
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(task) = self.task {
            writeln!(f, "task: {task}")?;
        }
        writeln!(f, "n: {}", self.n)?;
        writeln!(f, "accuracy:    {:.2}", self.accuracy)?;
        writeln!(f, "macro-F1:    {:.2}", self.macro_f1)?;
        writeln!(f, "weighted-F1: {:.2}", self.weighted_f1)?;
        if let Some(p) = self.pearson {
            writeln!(f, "P-corr:      {p:.2}")?;
        }
        writeln!(f, "confusion (rows gold, cols predicted):")?;
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(2);
        write!(f, "{:>4}", "")?;
        for c in 0..self.confusion.len() {
            write!(f, " {c:>width$}")?;
        }
        writeln!(f)?;
        for (g, row) in self.confusion.iter().enumerate() {
            write!(f, "{g:>4}")?;
            for v in row {
                write!(f, " {v:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn perfect_predictions() {
        let gold = [0, 1, 2, 2, 1];
        let m = classification_metrics(&gold, &gold, 3).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.weighted_f1), (100.0, 100.0, 100.0));
        let total: u64 = m.confusion.iter().flatten().sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn hand_worked_binary_case() {
        // TP0 = 1, FN0 = 1, TP1 = 2, FP1 = 1
        let m = classification_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r2(m.accuracy), 75.00);
        assert_eq!(r2(m.per_class_f1[0]), 66.67);
        assert_eq!(r2(m.per_class_f1[1]), 80.00);
        assert_eq!(r2(m.macro_f1), 73.33);
        assert_eq!(r2(m.weighted_f1), 73.33);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn absent_class_counts_as_zero_in_macro() {
        let m = classification_metrics(&[0, 1, 0, 1], &[0, 1, 0, 1], 3).unwrap();
        assert_eq!(m.per_class_f1[2], 0.0);
        assert!((m.macro_f1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.weighted_f1, 100.0);
    }

    #[test]
    fn constant_prediction_on_balanced_set() {
        let m = classification_metrics(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(r2(m.per_class_f1[1]), 66.67);
        assert_eq!(r2(m.macro_f1), 33.33);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(
            classification_metrics(&[0, 1], &[0], 2),
            Err(StatsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            classification_metrics(&[0, 2], &[0, 1], 2),
            Err(StatsError::ClassOutOfRange { value: 2, classes: 2 })
        ));
        assert!(classification_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert_eq!(pearson_ordinal(&[1, 2, 3, 2], &[1, 2, 3, 2]).unwrap(), 100.0);
        assert_eq!(pearson_ordinal(&[1, 2, 3], &[3, 2, 1]).unwrap(), -100.0);
        // cov = 2/4, var_g = 2.75/4, var_p = 2/4  ->  2 / sqrt(5.5)
        let r = pearson_ordinal(&[1, 1, 2, 3], &[1, 2, 2, 3]).unwrap();
        assert!((r - 100.0 * 2.0 / 5.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r2(r), 85.28);
        assert!(matches!(pearson_ordinal(&[2, 2, 2], &[1, 2, 3]), Err(StatsError::DegenerateVariance)));
        assert!(matches!(pearson_ordinal(&[1], &[1]), Err(StatsError::TooFew(_))));
    }
}
