//! Confusion-matrix evaluation with phishing as the positive class.
//!
//! Any metric whose denominator is zero is reported as 0. Values are kept
//! as fractions in `[0, 1]`; percentages only appear when rendering.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Phishing, Label::Phishing) => self.tp += 1,
            (Label::Phishing, Label::Benign) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Benign, Label::Phishing) => self.fn_ += 1,
        }
    }
}

/// Tallies predictions against ground truth.
pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<Confusion> {
    if predictions.len() != truths.len() {
        return Err(Error::dim("confusion inputs", truths.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let mut c = Confusion::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        c.record(p, t);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derives accuracy, precision, recall and F1 from confusion counts.
pub fn report(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<EvalReport> {
    let total = tp + fp + tn + fn_;
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let accuracy = ratio(tp + tn, total);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * (precision * recall) / (precision + recall)
    };
    Ok(EvalReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy,
        precision,
        recall,
        f1,
    })
}

impl EvalReport {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        report(c.tp, c.fp, c.tn, c.fn_)
    }

    pub fn counts_total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "tp={} fp={} tn={} fn={} (n={})",
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.counts_total()
        )?;
        writeln!(f, "accuracy:  {}", percent(self.accuracy))?;
        writeln!(f, "precision: {}", percent(self.precision))?;
        writeln!(f, "recall:    {}", percent(self.recall))?;
        write!(f, "f1:        {}", percent(self.f1))
    }
}

/// Renders a fraction as a percentage with two decimals, e.g. `96.80%`.
pub fn percent(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}
