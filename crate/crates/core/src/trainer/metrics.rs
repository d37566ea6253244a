//! Accuracy, F1, confusion matrices, and fold aggregation.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Positive-class F1 for binary tasks, macro F1 otherwise.
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
        }
        if predicted.len() != truth.len() {
            return Err(Error::InvalidArgument("prediction and label counts differ".into()));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::InvalidArgument(format!("class index outside 0..{n_classes}")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let n = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..n).map(|k| confusion[k][k]).sum();
        let class_f1 = |k: usize| {
            let tp = confusion[k][k] as f64;
            let fp = (0..n).filter(|&t| t != k).map(|t| confusion[t][k]).sum::<usize>() as f64;
            let fn_ = (0..n).filter(|&p| p != k).map(|p| confusion[k][p]).sum::<usize>() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        };
        let f1 = if n == 2 {
            class_f1(1)
        } else {
            (0..n).map(class_f1).sum::<f64>() / n as f64
        };
        Self {
            accuracy: correct as f64 / total.max(1) as f64,
            f1,
            confusion,
        }
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

/// Element-wise sum of confusion matrices.
pub fn pooled_confusion(parts: &[&Metrics]) -> Vec<Vec<usize>> {
    let n = parts.first().map_or(0, |m| m.confusion.len());
    let mut out = vec![vec![0; n]; n];
    for m in parts {
        for (row, src) in out.iter_mut().zip(&m.confusion) {
            for (o, s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    out
}

pub fn argmax_rows(probs: &[f64], n_classes: usize) -> Vec<usize> {
    probs
        .chunks(n_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &p)| if p > best.1 { (k, p) } else { best },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0, 1];
        let m = Metrics::from_predictions(&y, &y, 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![0, 3]]);
    }

    #[test]
    fn hand_counted_f1() {
        let confusion = vec![vec![30, 10], vec![10, 50]];
        let m = Metrics::from_confusion(confusion);
        assert!((m.f1 - 0.8333).abs() < 1e-4);
        assert!((m.accuracy - 0.8).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let truth: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let m = Metrics::from_predictions(&[1; 10], &truth, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        let rows: Vec<usize> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![5, 5]);
    }

    #[test]
    fn macro_f1_for_four_classes() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let pred = [0, 1, 2, 3, 0, 1, 2, 0];
        let m = Metrics::from_predictions(&pred, &truth, 4).unwrap();
        let f0 = 2.0 * 2.0 / (4.0 + 1.0);
        let f3 = 2.0 * 1.0 / (2.0 + 1.0);
        assert!((m.f1 - (f0 + 1.0 + 1.0 + f3) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(Metrics::from_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn summary_and_argmax() {
        let s = summarize(&[0.8, 0.9, 1.0]);
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(argmax_rows(&[0.2, 0.8, 0.6, 0.4], 2), vec![1, 0]);
    }
}
