use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold on the fake probability.
pub const THRESHOLD: f64 = 0.5;

/// Confusion counts with "fake" (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassMetrics {
    fn new(hit: usize, false_alarm: usize, miss: usize) -> Self {
        let precision = ratio(hit, hit + false_alarm);
        let recall = ratio(hit, hit + miss);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub fake: ClassMetrics,
    pub real: ClassMetrics,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            fake: ClassMetrics::new(c.tp, c.fp, c.fn_),
            real: ClassMetrics::new(c.tn, c.fn_, c.fp),
            confusion: c,
        }
    }

    pub fn from_predictions(probs: &[f64], labels: &[u8]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("metrics over an empty record set".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= THRESHOLD, y) {
                (true, 1) => c.tp += 1,
                (true, 0) => c.fp += 1,
                (false, 0) => c.tn += 1,
                (false, 1) => c.fn_ += 1,
                (_, other) => return Err(Error::Contract(format!("label {other} outside {{0, 1}}"))),
            }
        }
        Ok(Self::from_confusion(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let m = Metrics::from_confusion(Confusion {
            tp: 3,
            fp: 1,
            tn: 4,
            fn_: 2,
        });
        assert!((m.fake.precision - 0.75).abs() < 1e-15);
        assert!((m.fake.recall - 0.6).abs() < 1e-15);
        assert!((m.fake.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!((m.real.precision - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.real.recall - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = Metrics::from_predictions(&[0.9, 0.1, 0.7], &[1, 0, 1]).unwrap();
        assert_eq!((m.accuracy, m.fake.f1, m.real.f1), (1.0, 1.0, 1.0));
        let m = Metrics::from_predictions(&[0.1, 0.2], &[1, 0]).unwrap();
        assert_eq!(m.fake.precision, 0.0);
        assert_eq!(m.fake.f1, 0.0);
        assert!(Metrics::from_predictions(&[], &[]).is_err());
    }
}
