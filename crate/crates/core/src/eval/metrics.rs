use std::fmt;

use crate::data::ClassLabel;
use crate::error::{Error, Result};

/// Confusion counts and derived scores, positive class = `ClassLabel::Positive`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Set when precision had a zero denominator and is reported as 0.
    pub precision_undefined: bool,
    /// Set when recall had a zero denominator and is reported as 0.
    pub recall_undefined: bool,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A prediction counts as positive when `P ≥ threshold`.
pub fn compute_metrics(predictions: &[(f64, ClassLabel)], threshold: f64) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Argument("no predictions to score".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(p, label) in predictions {
        match (p >= threshold, label.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        precision_undefined,
        recall_undefined,
    })
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |undefined: bool| if undefined { " (undefined)" } else { "" };
        writeln!(f, "accuracy\t{}", self.accuracy)?;
        writeln!(f, "precision\t{}{}", self.precision, flag(self.precision_undefined))?;
        writeln!(f, "recall\t{}{}", self.recall, flag(self.recall_undefined))?;
        writeln!(f, "true_positives\t{}", self.true_positives)?;
        writeln!(f, "false_positives\t{}", self.false_positives)?;
        writeln!(f, "true_negatives\t{}", self.true_negatives)?;
        write!(f, "false_negatives\t{}", self.false_negatives)
    }
}
