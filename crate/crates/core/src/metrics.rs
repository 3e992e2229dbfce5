//! Confusion counts and the precision / recall / F1 / IoU derived from them.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Adds one prediction/ground-truth pair of binary maps.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("accumulate", &[pred.len()], &[truth.len()]));
        }
        let mut local = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(truth) {
            match (p, g) {
                (1, 1) => local.tp += 1,
                (0, 0) => local.tn += 1,
                (1, 0) => local.fp += 1,
                (0, 1) => local.fn_ += 1,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "accumulate: non-binary value (pred {p}, truth {g})"
                    )))
                }
            }
        }
        *self += local;
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        compute_metrics(self)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Scores in `[0, 1]`. `degenerate` is set when any ratio had a zero
/// denominator and was reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut degenerate);
    let iou = ratio(tp, fn_ + fp + tp, &mut degenerate);
    Metrics {
        precision,
        recall,
        f1,
        iou,
        degenerate,
    }
}

impl Metrics {
    /// Percentages with two decimals, in P / R / F1 / IoU order.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8}\n{:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            "P",
            "R",
            "F1",
            "IoU",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            100.0 * self.iou
        )
    }
}
