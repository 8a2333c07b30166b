//! Accuracy, calibration error and Brier score.
//!
//! Accuracies are macro-averaged per-class recall, reported at three label
//! granularities: the raw seven categories, three (positive / any exception
//! / negative) and binary (positive / everything else).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_CATEGORIES;
use crate::numeric::Vector;

/// Three-way class ids.
pub const POSITIVE: usize = 0;
pub const EXCEPTION: usize = 1;
pub const NEGATIVE: usize = 2;

/// Binary class ids.
pub const BINARY_POSITIVE: usize = 0;
pub const BINARY_NEGATIVE: usize = 1;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Every exception is its own class.
    Seven,
    /// Exceptions 1-5 merged into one class.
    Three,
    /// Exceptions count as negative.
    Binary,
}

impl Granularity {
    pub fn num_classes(self) -> usize {
        match self {
            Granularity::Seven => NUM_CATEGORIES,
            Granularity::Three => 3,
            Granularity::Binary => 2,
        }
    }

    pub fn remap(self, label7: usize) -> Result<usize> {
        if label7 >= NUM_CATEGORIES {
            return Err(Error::invalid(format!(
                "category {label7} out of range (valid 0-{})",
                NUM_CATEGORIES - 1
            )));
        }
        Ok(match self {
            Granularity::Seven => label7,
            Granularity::Three => match label7 {
                0 => POSITIVE,
                6 => NEGATIVE,
                _ => EXCEPTION,
            },
            Granularity::Binary => {
                if label7 == 0 {
                    BINARY_POSITIVE
                } else {
                    BINARY_NEGATIVE
                }
            }
        })
    }
}

pub fn remap(label7: usize, granularity: Granularity) -> Result<usize> {
    granularity.remap(label7)
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "{what}: {a} predictions but {b} labels"
        )));
    }
    if a == 0 {
        return Err(Error::invalid(format!("{what}: no samples")));
    }
    Ok(())
}

/// Macro-averaged recall after remapping both predictions and labels.
/// Classes that never occur in `labels` are left out of the average.
pub fn mean_accuracy(preds7: &[usize], labels7: &[usize], granularity: Granularity) -> Result<f64> {
    check_lengths(preds7.len(), labels7.len(), "mean accuracy")?;
    let n = granularity.num_classes();
    let mut hits = vec![0usize; n];
    let mut support = vec![0usize; n];
    for (&p, &l) in preds7.iter().zip(labels7) {
        let p = granularity.remap(p)?;
        let l = granularity.remap(l)?;
        support[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&support)
        .filter(|(_, &s)| s > 0)
        .map(|(&h, &s)| h as f64 / s as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Plain fraction of correct predictions after remapping.
pub fn micro_accuracy(
    preds7: &[usize],
    labels7: &[usize],
    granularity: Granularity,
) -> Result<f64> {
    check_lengths(preds7.len(), labels7.len(), "accuracy")?;
    let mut hits = 0usize;
    for (&p, &l) in preds7.iter().zip(labels7) {
        if granularity.remap(p)? == granularity.remap(l)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds7.len() as f64)
}

/// One equal-width confidence bin `(lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Fraction correct; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean confidence; 0 for an empty bin.
    pub confidence: f64,
}

impl CalibrationBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationBins {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Reliability-diagram rows: `bin_center,acc,conf,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,acc,conf,count\n");
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                b.center(),
                b.accuracy,
                b.confidence,
                b.count
            );
        }
        out
    }

    /// Static reliability diagram: accuracy bars per bin, mean-confidence
    /// markers and the identity diagonal.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 400.0;
        const MARGIN: f64 = 40.0;
        let plot = SIZE - 2.0 * MARGIN;
        let x = |v: f64| MARGIN + v * plot;
        let y = |v: f64| SIZE - MARGIN - v * plot;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(
            s,
            r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
        );
        for b in &self.bins {
            if b.count == 0 {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<rect class="acc" x="{:.4}" y="{:.4}" width="{:.4}" height="{:.4}" fill="#4a7ab7" stroke="#1f3d66"/>"##,
                x(b.lower),
                y(b.accuracy),
                x(b.upper) - x(b.lower),
                b.accuracy * plot
            );
            let _ = writeln!(
                s,
                r##"<circle class="conf" cx="{:.4}" cy="{:.4}" r="3" fill="#d1495b"/>"##,
                x(b.center()),
                y(b.confidence)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{:.4}" y1="{:.4}" x2="{:.4}" y2="{:.4}" stroke="gray" stroke-dasharray="4 4"/>"#,
            x(0.0),
            y(0.0),
            x(1.0),
            y(1.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.4}" y="{:.4}" font-size="12" text-anchor="middle">confidence</text>"#,
            SIZE / 2.0,
            SIZE - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="12" y="{:.4}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {:.4})">accuracy</text>"#,
            SIZE / 2.0,
            SIZE / 2.0
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Bin index for a confidence in `(0, 1]` with `bins` equal-width bins
/// `(l/L, (l+1)/L]`.
fn bin_index(conf: f64, bins: usize) -> usize {
    let idx = (conf * bins as f64).ceil() as usize;
    idx.clamp(1, bins) - 1
}

/// Expected calibration error over `bins` equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<(f64, CalibrationBins)> {
    check_lengths(confidences.len(), correct.len(), "ECE")?;
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::invalid(format!("confidence {c} outside (0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            hits[b] += 1;
        }
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (accuracy, confidence) = if count[b] > 0 {
                (
                    hits[b] as f64 / count[b] as f64,
                    conf_sum[b] / count[b] as f64,
                )
            } else {
                (0.0, 0.0)
            };
            if count[b] > 0 {
                total += count[b] as f64 / n * (accuracy - confidence).abs();
            }
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                accuracy,
                confidence,
            }
        })
        .collect();
    Ok((total, CalibrationBins { bins: table }))
}

/// Multiclass Brier score: mean squared distance to the one-hot label.
/// Ranges over `[0, 2]`.
pub fn brier(mean_probs: &[Vector], labels: &[usize]) -> Result<f64> {
    check_lengths(mean_probs.len(), labels.len(), "Brier score")?;
    let mut total = 0.0;
    for (p, &label) in mean_probs.iter().zip(labels) {
        if label >= p.dim() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} categories",
                p.dim()
            )));
        }
        total += p
            .iter()
            .enumerate()
            .map(|(i, &pi)| {
                let target = if i == label { 1.0 } else { 0.0 };
                (pi - target).powi(2)
            })
            .sum::<f64>();
    }
    Ok(total / mean_probs.len() as f64)
}

/// Everything the `metrics` command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sample_count: usize,
    pub num_bins: usize,
    pub ece: f64,
    pub brier: f64,
    /// Seven-way macro accuracy (mAcc-E).
    pub acc_e: f64,
    /// Three-way macro accuracy (mAcc).
    pub acc_3: f64,
    /// Binary macro accuracy (mAcc-B).
    pub acc_b: f64,
    pub micro_acc_e: f64,
    pub micro_acc_3: f64,
    pub micro_acc_b: f64,
    pub bins: CalibrationBins,
}

/// Scores mean predictive distributions against seven-way labels.
pub fn evaluate(mean_probs: &[Vector], labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    check_lengths(mean_probs.len(), labels.len(), "evaluation")?;
    let preds: Vec<usize> = mean_probs.iter().map(|p| p.argmax()).collect();
    let confidences: Vec<f64> = mean_probs.iter().map(|p| p.max()).collect();
    let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, l)| p == l).collect();
    let (ece, bin_table) = ece(&confidences, &correct, bins)?;
    Ok(CalibrationReport {
        sample_count: labels.len(),
        num_bins: bins,
        ece,
        brier: brier(mean_probs, labels)?,
        acc_e: mean_accuracy(&preds, labels, Granularity::Seven)?,
        acc_3: mean_accuracy(&preds, labels, Granularity::Three)?,
        acc_b: mean_accuracy(&preds, labels, Granularity::Binary)?,
        micro_acc_e: micro_accuracy(&preds, labels, Granularity::Seven)?,
        micro_acc_3: micro_accuracy(&preds, labels, Granularity::Three)?,
        micro_acc_b: micro_accuracy(&preds, labels, Granularity::Binary)?,
        bins: bin_table,
    })
}
