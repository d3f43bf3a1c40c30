//! Confusion matrices and macro-averaged F1 over the eight expression classes.
//!
//! A class with no predictions has precision 0, a class with no true samples
//! has recall 0, and either case gives that class an F1 of 0. The macro
//! average always divides by all eight classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{CLASS_NAMES, N_CLASSES};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= N_CLASSES || predicted >= N_CLASSES {
            return Err(Error::invalid(format!(
                "labels ({truth}, {predicted}) outside 0..{N_CLASSES}"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> [u64; N_CLASSES] {
        std::array::from_fn(|i| self.counts[i].iter().sum())
    }

    pub fn report(&self) -> MetricsReport {
        macro_f1(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    /// `macro_f1` as a percentage with two decimals, e.g. 27.77.
    pub macro_f1_percent: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                c.class, c.precision, c.recall, c.f1, c.support
            ));
        }
        out
    }

    /// Mean F1 over a subset of classes.
    pub fn subset_macro_f1(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.per_class[c].f1).sum::<f64>() / classes.len() as f64
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_f1(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = (0..N_CLASSES)
        .map(|i| {
            let tp = cm.counts[i][i];
            let predicted: u64 = (0..N_CLASSES).map(|r| cm.counts[r][i]).sum();
            let actual: u64 = cm.counts[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class: CLASS_NAMES[i].to_string(),
                precision,
                recall,
                f1,
                support: actual,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / N_CLASSES as f64;
    MetricsReport {
        per_class,
        macro_f1,
        macro_f1_percent: (macro_f1 * 10000.0).round() / 100.0,
    }
}
