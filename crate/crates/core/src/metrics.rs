//! Confusion-matrix accounting and per-class / macro F1.
//!
//! Zero denominators resolve to 0: a class that is never predicted has precision 0, a class
//! with no true members has recall 0, and F1 is 0 when precision and recall are both 0.
//! Per-class "accuracy" is the one-vs-rest hit rate on true members, i.e. recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::heightfield::DefectLabel;
use crate::{Error, Result};

/// K×K counts, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<DefectLabel>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(labels: Vec<DefectLabel>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Metrics(format!("counts must be {k}x{k}")));
        }
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != k {
            return Err(Error::Metrics("duplicate label in confusion matrix".into()));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn labels(&self) -> &[DefectLabel] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: DefectLabel, pred: DefectLabel) -> u64 {
        match (self.position(truth), self.position(pred)) {
            (Some(t), Some(p)) => self.counts[t][p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn position(&self, l: DefectLabel) -> Option<usize> {
        self.labels.iter().position(|&x| x == l)
    }
}

/// Confusion matrix over the three defect labels.
pub fn confusion(truths: &[DefectLabel], preds: &[DefectLabel]) -> Result<ConfusionMatrix> {
    confusion_over(&DefectLabel::ALL, truths, preds)
}

/// Confusion matrix over a declared label set; labels outside the set are errors.
pub fn confusion_over(labels: &[DefectLabel], truths: &[DefectLabel], preds: &[DefectLabel]) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(Error::Metrics(format!(
            "length mismatch: {} truths vs {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let k = labels.len();
    let mut m = ConfusionMatrix::from_counts(labels.to_vec(), vec![vec![0; k]; k])?;
    for (&t, &p) in truths.iter().zip(preds) {
        let ti = m.position(t).ok_or_else(|| Error::Metrics(format!("unknown label `{t}`")))?;
        let pi = m.position(p).ok_or_else(|| Error::Metrics(format!("unknown label `{p}`")))?;
        m.counts[ti][pi] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<DefectLabel, ClassScores>,
    pub macro_f1: f64,
    /// Correct / total; equals micro-averaged F1 for single-label classification.
    pub micro_f1: f64,
    pub n_items: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(m: &ConfusionMatrix) -> EvalReport {
    let k = m.labels.len();
    let mut per_class = BTreeMap::new();
    let mut f1_sum = 0.0;
    for (c, &label) in m.labels.iter().enumerate() {
        let tp = m.counts[c][c];
        let predicted: u64 = (0..k).map(|t| m.counts[t][c]).sum();
        let actual: u64 = m.counts[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.insert(
            label,
            ClassScores {
                precision,
                recall,
                f1,
                accuracy: recall,
            },
        );
    }
    let total = m.total();
    let correct: u64 = (0..k).map(|c| m.counts[c][c]).sum();
    EvalReport {
        per_class,
        macro_f1: if k == 0 { 0.0 } else { f1_sum / k as f64 },
        micro_f1: ratio(correct, total),
        n_items: total,
    }
}

impl EvalReport {
    pub fn class(&self, label: DefectLabel) -> Option<&ClassScores> {
        self.per_class.get(&label)
    }

    pub fn accuracy(&self, label: DefectLabel) -> f64 {
        self.class(label).map_or(0.0, |c| c.accuracy)
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["model".to_string(), "train_size".into(), "seed".into(), "macro_f1".into()];
        for l in DefectLabel::ALL {
            for m in ["precision", "recall", "f1", "accuracy"] {
                cols.push(format!("{l}_{m}"));
            }
        }
        cols.join(",")
    }

    pub fn csv_row(&self, model: &str, train_size: usize, seed: u64) -> String {
        let mut cols = vec![
            model.to_string(),
            train_size.to_string(),
            seed.to_string(),
            format!("{:.6}", self.macro_f1),
        ];
        for l in DefectLabel::ALL {
            let s = self.class(l).copied().unwrap_or(ClassScores {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                accuracy: 0.0,
            });
            for v in [s.precision, s.recall, s.f1, s.accuracy] {
                cols.push(format!("{v:.6}"));
            }
        }
        cols.join(",")
    }
}
