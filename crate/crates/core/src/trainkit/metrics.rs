use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tasks::Scheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold count.
    pub support: usize,
    /// Predicted count.
    pub predicted: usize,
}

/// Precision/recall/F1 per class plus macro and micro aggregates.
///
/// Macro-F1 averages over the classes that occur in gold or predictions;
/// classes absent from both carry zero rows but do not drag the mean down.
/// With every class counted and one label per item, micro-F1 equals
/// accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub token_level: bool,
    pub classes: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricReport {
    /// Builds the report from `(predicted, gold)` label-id pairs.
    pub fn from_pairs(labels: &[String], pairs: &[(usize, usize)], token_level: bool) -> Result<Self> {
        let k = labels.len();
        let mut tp = vec![0usize; k];
        let mut pred = vec![0usize; k];
        let mut gold = vec![0usize; k];
        for (i, &(p, g)) in pairs.iter().enumerate() {
            if p >= k || g >= k {
                return Err(Error::Data(format!(
                    "item {i}: label id ({p}, {g}) outside the {k}-label set"
                )));
            }
            pred[p] += 1;
            gold[g] += 1;
            if p == g {
                tp[p] += 1;
            }
        }
        let classes: Vec<ClassMetrics> = labels
            .iter()
            .enumerate()
            .map(|(c, label)| {
                let precision = ratio(tp[c], pred[c]);
                let recall = ratio(tp[c], gold[c]);
                ClassMetrics {
                    label: label.clone(),
                    precision,
                    recall,
                    f1: harmonic(precision, recall),
                    support: gold[c],
                    predicted: pred[c],
                }
            })
            .collect();
        let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.support + c.predicted > 0).collect();
        let macro_f1 = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64
        };
        let correct: usize = tp.iter().sum();
        let total = pairs.len();
        let micro_p = ratio(correct, pred.iter().sum());
        let micro_r = ratio(correct, gold.iter().sum());
        Ok(Self {
            token_level,
            classes,
            macro_f1,
            micro_f1: harmonic(micro_p, micro_r),
            accuracy: ratio(correct, total),
            total,
        })
    }

    /// Headline score: macro-F1.
    pub fn f1(&self) -> f64 {
        self.macro_f1
    }

    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,precision,recall,f1,support\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{},{},{},{}", csv_field(&c.label), c.precision, c.recall, c.f1, c.support);
        }
        let _ = writeln!(out, "macro,,,{},{}", self.macro_f1, self.total);
        let _ = writeln!(out, "micro,,,{},{}", self.micro_f1, self.total);
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-example (classification) or per-token (tagging) F1.
///
/// `gold` holds one entry per scored position; `None` marks positions that
/// are not scored (specials, pads, continuation pieces). Classification
/// rows hold exactly one entry. `predictions` must have the same layout.
pub fn evaluate_f1(
    predictions: &[Vec<usize>],
    gold: &[Vec<Option<usize>>],
    labels: &[String],
    scheme: Scheme,
) -> Result<MetricReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    let mut pairs = Vec::new();
    for (i, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "example {i}: {} predicted positions but {} gold positions",
                p.len(),
                g.len()
            )));
        }
        if scheme == Scheme::Classification && g.len() != 1 {
            return Err(Error::Data(format!("example {i}: classification expects one label, got {}", g.len())));
        }
        pairs.extend(p.iter().zip(g).filter_map(|(&p, g)| g.map(|g| (p, g))));
    }
    MetricReport::from_pairs(labels, &pairs, scheme == Scheme::Tagging)
}
