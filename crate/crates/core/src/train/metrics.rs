//! Confusion counts and the derived ratios. Malicious is the positive class.
//! Ratios with a zero denominator are reported as absent, never silently 0.

use crate::corpus::Label;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub fn empty() -> Self {
        Metrics {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
            accuracy: None,
            precision: None,
            recall: None,
            f1: None,
        }
    }

    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                None
            } else {
                Some(num as f64 / den as f64)
            }
        };
        let accuracy = ratio(tp + tn, tp + tn + fp + fn_);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => None,
            _ => None,
        };
        Metrics {
            tp,
            tn,
            fp,
            fn_,
            accuracy,
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn compute_metrics(predictions: &[Label], truths: &[Label]) -> Metrics {
    assert_eq!(predictions.len(), truths.len());
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&pred, &truth) in predictions.iter().zip(truths) {
        match (pred, truth) {
            (Label::Malicious, Label::Malicious) => tp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Malicious, Label::Benign) => fp += 1,
            (Label::Benign, Label::Malicious) => fn_ += 1,
        }
    }
    Metrics::from_counts(tp, tn, fp, fn_)
}
