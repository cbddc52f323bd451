//! Classification and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::contract(
            "confusion_matrix",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::contract(
                "confusion_matrix",
                format!("class id (label {t}, prediction {p}) outside [0, {k})"),
            ));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro precision and recall; F1 is the harmonic mean of the two macro
/// values. A class with no predicted (or no true) members contributes 0 to
/// the precision (or recall) average.
pub fn prf1(cm: &ConfusionMatrix) -> Result<Prf1> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("prf1", "empty confusion matrix"));
    }
    let k = cm.num_classes();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let predicted: u64 = (0..k).map(|t| cm.counts[t][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        if predicted > 0 {
            p_sum += tp / predicted as f64;
        }
        if actual > 0 {
            r_sum += tp / actual as f64;
        }
    }
    let precision = p_sum / k as f64;
    let recall = r_sum / k as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf1 {
        accuracy: cm.trace() as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// 0 for empty bins.
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub oe: f64,
    pub brier: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Index of the right-closed bin `(m/M, (m+1)/M]` holding `c`; 0 goes to the first bin.
fn bin_index(c: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut idx = ((c * mf).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
    if idx > 0 && c <= idx as f64 / mf {
        idx -= 1;
    }
    if idx + 1 < m && c > (idx + 1) as f64 / mf {
        idx += 1;
    }
    idx
}

fn check_inputs(op: &str, confidences: &[f64], correct: &[bool], m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::contract(op, "bin count must be at least 1"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::contract(
            op,
            format!("{} confidences vs {} outcomes", confidences.len(), correct.len()),
        ));
    }
    if confidences.is_empty() {
        return Err(Error::contract(op, "no predictions"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::contract(op, format!("confidence {c} outside [0, 1]")));
    }
    Ok(())
}

pub fn calibration_bins(confidences: &[f64], correct: &[bool], m: usize) -> Result<Vec<CalibrationBin>> {
    check_inputs("calibration_bins", confidences, correct, m)?;
    let mut count = vec![0usize; m];
    let mut hits = vec![0usize; m];
    let mut conf = vec![0f64; m];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, m);
        count[b] += 1;
        hits[b] += ok as usize;
        conf[b] += c;
    }
    Ok((0..m)
        .map(|b| {
            let n = count[b];
            CalibrationBin {
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
                count: n,
                accuracy: if n > 0 { hits[b] as f64 / n as f64 } else { 0.0 },
                confidence: if n > 0 { conf[b] / n as f64 } else { 0.0 },
            }
        })
        .collect())
}

fn weighted_sum(bins: &[CalibrationBin], f: impl Fn(&CalibrationBin) -> f64) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * f(b))
        .sum()
}

pub fn ece(confidences: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    let bins = calibration_bins(confidences, correct, m)?;
    Ok(weighted_sum(&bins, |b| (b.accuracy - b.confidence).abs()))
}

pub fn oe(confidences: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    let bins = calibration_bins(confidences, correct, m)?;
    Ok(weighted_sum(&bins, |b| b.confidence * (b.confidence - b.accuracy).max(0.0)))
}

pub fn brier(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::contract(
            "brier",
            format!("{} probability rows vs {} labels", probs.len(), labels.len()),
        ));
    }
    let mut total = 0.0;
    for (n, (row, &y)) in probs.iter().zip(labels).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::contract("brier", format!("row {n} sums to {s}, not 1")));
        }
        if y >= row.len() {
            return Err(Error::contract("brier", format!("label {y} outside [0, {})", row.len())));
        }
        total += row
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let t = if k == y { 1.0 } else { 0.0 };
                (p - t) * (p - t)
            })
            .sum::<f64>();
    }
    Ok(total / probs.len() as f64)
}

/// Max-probability confidence and argmax correctness per row. Ties go to the lowest class.
pub fn confidence_and_correctness(probs: &[Vec<f64>], labels: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<bool>) {
    let mut preds = Vec::with_capacity(probs.len());
    let mut conf = Vec::with_capacity(probs.len());
    let mut ok = Vec::with_capacity(probs.len());
    for (row, &y) in probs.iter().zip(labels) {
        let (arg, &best) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (i, p)| if *p > *acc.1 { (i, p) } else { acc });
        preds.push(arg);
        conf.push(best.clamp(0.0, 1.0));
        ok.push(arg == y);
    }
    (preds, conf, ok)
}

pub fn calibration_report(probs: &[Vec<f64>], labels: &[usize], m: usize) -> Result<CalibrationReport> {
    let (_, conf, ok) = confidence_and_correctness(probs, labels);
    let bins = calibration_bins(&conf, &ok, m)?;
    Ok(CalibrationReport {
        ece: weighted_sum(&bins, |b| (b.accuracy - b.confidence).abs()),
        oe: weighted_sum(&bins, |b| b.confidence * (b.confidence - b.accuracy).max(0.0)),
        brier: brier(probs, labels)?,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    pub calibration: CalibrationReport,
}

impl MetricsReport {
    pub fn from_probs(probs: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if let Some(row) = probs.iter().find(|r| r.len() != k) {
            return Err(Error::contract(
                "metrics",
                format!("probability row of length {} for {k} classes", row.len()),
            ));
        }
        let (preds, _, _) = confidence_and_correctness(probs, labels);
        let confusion = confusion_matrix(&preds, labels, k)?;
        let s = prf1(&confusion)?;
        Ok(Self {
            class_names: class_names.to_vec(),
            samples: labels.len(),
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            calibration: calibration_report(probs, labels, DEFAULT_BINS)?,
            confusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion() {
        let cm = confusion_matrix(&[0, 2, 2, 1], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 0, 1], vec![0, 1, 1]]);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let s = prf1(&cm).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_predicted_zero() {
        let cm = ConfusionMatrix {
            counts: vec![vec![50, 0], vec![50, 0]],
        };
        let s = prf1(&cm).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.precision, 0.25);
    }

    #[test]
    fn two_bin_ece_example() {
        let mut conf = vec![0.9; 4];
        conf.extend([0.6; 6]);
        let mut ok = vec![true, true, true, false];
        ok.extend([true, true, true, false, false, false]);
        assert!((ece(&conf, &ok, 10).unwrap() - 0.12).abs() < 1e-12);
    }

    #[test]
    fn single_bin_oe_example() {
        let conf = vec![0.9; 4];
        let ok = vec![true, true, true, false];
        assert!((oe(&conf, &ok, 10).unwrap() - 0.135).abs() < 1e-12);
        // underconfident contributes nothing
        assert_eq!(oe(&[0.5, 0.5], &[true, true], 10).unwrap(), 0.0);
    }

    #[test]
    fn perfect_confidence_is_calibrated() {
        assert_eq!(ece(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
        assert_eq!(oe(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
    }

    #[test]
    fn brier_closed_forms() {
        let u = vec![vec![1.0 / 3.0; 3]];
        // 1/3 is not representable; the sum lands one ulp from 2/3
        assert!((brier(&u, &[0]).unwrap() - 2.0 / 3.0).abs() <= 4.0 * f64::EPSILON);
        assert_eq!(brier(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        assert_eq!(brier(&[vec![1.0, 0.0]], &[1]).unwrap(), 2.0);
        assert!(brier(&[vec![0.5, 0.6]], &[1]).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000001, 10), 3);
        assert_eq!(bin_index(1.0, 10), 9);
    }
}
