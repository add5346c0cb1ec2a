//! Calibration and ranking metrics over per-sample probability vectors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ensemble::{argmax, EnsemblePrediction};
use crate::tensor::ops::PROB_FLOOR;
use crate::{Error, Result};

/// Row-major `N × L` probabilities plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

const ROW_SUM_TOL: f64 = 1e-6;

impl PredictionBatch {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} probability rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(Error::InvalidArgument(format!("row {i} has {} classes, expected {classes}", r.len())));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || r.iter().any(|p| !(0.0..=1.0 + ROW_SUM_TOL).contains(p)) {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {s})")));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        Ok(Self {
            probs: rows.into_iter().flatten().collect(),
            labels,
            classes,
        })
    }

    pub fn from_predictions(preds: &[EnsemblePrediction], labels: &[usize]) -> Result<Self> {
        Self::new(preds.iter().map(|p| p.mean_probs.clone()).collect(), labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.classes.max(1))
    }

    pub fn predicted(&self, i: usize) -> usize {
        argmax(self.row(i)).0
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.rows().map(confidence).collect()
    }

    pub fn correct(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.predicted(i) == self.labels[i]).collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct().iter().filter(|&&c| c).count() as f64 / self.len().max(1) as f64
    }

    pub fn concat(&self, other: &PredictionBatch) -> Result<PredictionBatch> {
        if !self.is_empty() && !other.is_empty() && self.classes != other.classes {
            return Err(Error::InvalidArgument("batches disagree on class count".into()));
        }
        let mut out = self.clone();
        out.classes = self.classes.max(other.classes);
        out.probs.extend_from_slice(&other.probs);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

/// Largest class probability.
pub fn confidence(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub accuracy: f64,
    pub confidence: f64,
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Expected calibration error over `m` equal-width bins on (0, 1].
/// Bin `b` holds confidences in `(b/m, (b+1)/m]`; a confidence of exactly 0
/// falls in the first bin.
pub fn ece(batch: &PredictionBatch, m: usize) -> Result<(f64, Vec<CalibrationBin>)> {
    if m < 1 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("ECE of an empty batch".into()));
    }
    let mut count = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0f64; m];
    for i in 0..batch.len() {
        let row = batch.row(i);
        let c = confidence(row);
        let b = ((c * m as f64).ceil() as usize).clamp(1, m) - 1;
        count[b] += 1;
        conf_sum[b] += c;
        if argmax(row).0 == batch.labels[i] {
            correct[b] += 1;
        }
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let bins = (0..m)
        .map(|b| {
            let (acc, conf) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (correct[b] as f64 / count[b] as f64, conf_sum[b] / count[b] as f64)
            };
            total += count[b] as f64 / n * (acc - conf).abs();
            CalibrationBin {
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
                count: count[b],
                accuracy: acc,
                confidence: conf,
            }
        })
        .collect();
    Ok((total, bins))
}

/// Squared error of the probability matrix against one-hot labels, averaged
/// over samples and classes.
pub fn brier(batch: &PredictionBatch) -> f64 {
    let mut total = 0.0;
    for (i, row) in batch.rows().enumerate() {
        for (l, &p) in row.iter().enumerate() {
            let t = if l == batch.labels[i] { 1.0 } else { 0.0 };
            total += (p - t) * (p - t);
        }
    }
    total / (batch.len() * batch.classes).max(1) as f64
}

/// Mean negative log-probability of the true class.
pub fn nll(batch: &PredictionBatch) -> f64 {
    let total: f64 = (0..batch.len()).map(|i| -batch.row(i)[batch.labels[i]].clamp(PROB_FLOOR, 1.0).ln()).sum();
    total / batch.len().max(1) as f64
}

/// Per-class binary cross-entropy summed over classes, averaged over samples.
/// Diagnostic companion to [`nll`].
pub fn nll_binary(batch: &PredictionBatch) -> f64 {
    let mut total = 0.0;
    for (i, row) in batch.rows().enumerate() {
        for (l, &p) in row.iter().enumerate() {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            total -= if l == batch.labels[i] { p.ln() } else { (1.0 - p).ln() };
        }
    }
    total / batch.len().max(1) as f64
}

/// Support-weighted mean of per-class F1; 0/0 cases count as 0.
pub fn f1_weighted(batch: &PredictionBatch) -> f64 {
    let l = batch.classes;
    let (mut tp, mut fp, mut fneg, mut support) = (vec![0usize; l], vec![0usize; l], vec![0usize; l], vec![0usize; l]);
    for i in 0..batch.len() {
        let (y, p) = (batch.labels[i], batch.predicted(i));
        support[y] += 1;
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..l {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 };
        total += f1 * support[c] as f64;
    }
    total / batch.len().max(1) as f64
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count ½.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!("{} scores but {} flags", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("AUROC needs both positive and negative samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of positives; ranks are 1-based and doubled to stay integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank2_pos += mid2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Trapezoidal area under a precision-recall curve given as
/// `(recall, precision)` points. Duplicate recalls keep the highest
/// precision; the curve starts at `(0, precision of the lowest-recall
/// point)` and ends at the largest observed recall.
pub fn auprc(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("AUPRC of an empty curve".into()));
    }
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|next, kept| next.0 == kept.0);
    if pts[0].0 > 0.0 {
        pts.insert(0, (0.0, pts[0].1));
    }
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub f1: f64,
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    pub fn compute(batch: &PredictionBatch, m: usize) -> Result<Self> {
        let (e, bins) = ece(batch, m)?;
        let r = Self {
            f1: f1_weighted(batch),
            ece: e,
            brier: brier(batch),
            nll: nll(batch),
            accuracy: batch.accuracy(),
            bins,
        };
        for (name, v) in [("f1", r.f1), ("ece", r.ece), ("brier", r.brier), ("nll", r.nll)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("calibration metric {name}"),
                });
            }
        }
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reliability-diagram data, header `bin,lower,upper,count,accuracy,confidence`.
    pub fn bins_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count,accuracy,confidence\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(s, "{i},{:.6},{:.6},{},{:.6},{:.6}", b.lower, b.upper, b.count, b.accuracy, b.confidence);
        }
        s
    }
}
