use serde::{Deserialize, Serialize};

use super::loss::LossBreakdown;
use crate::error::{Error, Result};

/// `C×C` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::shape("confusion", &[y_true.len()], &[y_pred.len()]));
        }
        let mut c = Confusion::new(classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= self.classes {
                return Err(Error::Validation(format!(
                    "label {v} outside the {} trained classes",
                    self.classes
                )));
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    /// F1 per class; 0 where precision and recall are both undefined or zero.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let denom = (self.support(c) + self.predicted(c)) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    /// Support-weighted mean of per-class F1.
    pub fn weighted_f1(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.per_class_f1()
            .iter()
            .enumerate()
            .map(|(c, f)| f * self.support(c) as f64 / n as f64)
            .sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / n as f64
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn to_csv(&self) -> String {
        confusion_csv(&self.rows())
    }
}

/// Header `true\pred,0,1,…` then one line per true class.
pub fn confusion_csv(rows: &[Vec<u64>]) -> String {
    let mut out = String::from("true\\pred");
    for c in 0..rows.len() {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (t, row) in rows.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Losses and validation scores after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation_weighted_f1: f64,
    pub validation_accuracy: f64,
    /// Eval-mode accuracy on the training split, when tracked.
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub loss: LossBreakdown,
    pub loss_history: Vec<EpochRecord>,
    pub epochs: usize,
    /// Epoch after which patience ran out, if it did.
    pub early_stop_epoch: Option<usize>,
    pub best_epoch: Option<usize>,
}

impl MetricsReport {
    pub fn from_confusion(c: &Confusion, loss: LossBreakdown) -> Self {
        MetricsReport {
            weighted_f1: c.weighted_f1(),
            accuracy: c.accuracy(),
            per_class_f1: c.per_class_f1(),
            confusion: c.rows(),
            loss,
            loss_history: Vec::new(),
            epochs: 0,
            early_stop_epoch: None,
            best_epoch: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn confusion_csv(&self) -> String {
        confusion_csv(&self.confusion)
    }
}
