//! Field monitoring: sliding-window confidence and accuracy, accuracy-drop
//! events against in-distribution statistics, threshold sweeps, and
//! instance-level failure detection.
//!
//! Labels never reach a [`Predictor`]. [`evaluate`] runs the model on images
//! alone and compares against labels afterwards; everything downstream sees
//! only the resulting [`Outcomes`].

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ensemble::{Predictor, EVAL_CHUNK};
use crate::metrics::{auprc, auroc, PredictionBatch};
use crate::{Error, Result};

/// Default window length.
pub const DEFAULT_WINDOW: usize = 100;

/// Confidence thresholds 0.0, 0.1, ..., 1.0.
pub fn rho_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Fixed-capacity moving average with O(1) updates.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    ring: Vec<f64>,
    head: usize,
    filled: usize,
    running_sum: f64,
}

impl WindowState {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("window capacity must be at least 1".into()));
        }
        Ok(Self {
            ring: vec![0.0; capacity],
            head: 0,
            filled: 0,
            running_sum: 0.0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.ring.len()
    }

    /// Values currently in the window.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.ring.len()
    }

    /// Add `value` (must be finite) and return the new average.
    pub fn push(&mut self, value: f64) -> f64 {
        assert!(value.is_finite(), "window value must be finite, got {value}");
        let m = self.ring.len();
        self.running_sum += value - self.ring[self.head];
        self.ring[self.head] = value;
        self.head = (self.head + 1) % m;
        self.filled = (self.filled + 1).min(m);
        // Exact recompute once per lap bounds accumulated rounding.
        if self.head == 0 {
            self.running_sum = self.ring.iter().sum();
        }
        self.average()
    }

    pub fn average(&self) -> f64 {
        if self.filled == 0 {
            0.0
        } else {
            self.running_sum / self.filled as f64
        }
    }
}

/// Per-sample confidence and correctness, produced by [`evaluate`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
}

impl Outcomes {
    pub fn new(confidence: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        if confidence.len() != correct.len() {
            return Err(Error::InvalidArgument(format!(
                "{} confidences but {} outcomes",
                confidence.len(),
                correct.len()
            )));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self { confidence, correct })
    }

    pub fn from_batch(batch: &PredictionBatch) -> Self {
        Self {
            confidence: batch.confidences(),
            correct: batch.correct(),
        }
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    /// `self` followed by `other`.
    pub fn then(&self, other: &Outcomes) -> Outcomes {
        let mut out = self.clone();
        out.confidence.extend_from_slice(&other.confidence);
        out.correct.extend_from_slice(&other.correct);
        out
    }
}

/// Predict every image of `ds` in chunks of `chunk` samples, then score
/// against the labels.
pub fn predict_batch(predictor: &dyn Predictor, ds: &Dataset, chunk: usize) -> Result<PredictionBatch> {
    let chunk = chunk.max(1);
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk) {
        preds.extend(predictor.predict(&ds.tensor(part))?);
    }
    PredictionBatch::from_predictions(&preds, ds.labels())
}

/// Confidence and correctness of every sample of `ds`.
pub fn evaluate(predictor: &dyn Predictor, ds: &Dataset) -> Result<Outcomes> {
    Ok(Outcomes::from_batch(&predict_batch(predictor, ds, EVAL_CHUNK)?))
}

/// Mean and population standard deviation of windowed in-distribution accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdStats {
    pub mu_id: f64,
    pub sigma_id: f64,
    pub m: usize,
}

impl IdStats {
    /// Statistics over every full window of the in-distribution stream.
    pub fn from_outcomes(id: &Outcomes, m: usize) -> Result<Self> {
        if id.len() < m {
            return Err(Error::Data(format!("in-distribution stream has {} samples, window needs {m}", id.len())));
        }
        let mut w = WindowState::new(m)?;
        let mut acc = Vec::with_capacity(id.len() + 1 - m);
        for &c in &id.correct {
            let a = w.push(if c { 1.0 } else { 0.0 });
            if w.is_full() {
                acc.push(a);
            }
        }
        let n = acc.len() as f64;
        let mu = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mu_id: mu,
            sigma_id: var.sqrt(),
            m,
        })
    }

    /// Windowed accuracy at or below this value counts as a drop.
    pub fn drop_threshold(&self) -> f64 {
        self.mu_id - 3.0 * self.sigma_id
    }
}

pub fn calibrate_id_stats(predictor: &dyn Predictor, id: &Dataset, m: usize) -> Result<IdStats> {
    IdStats::from_outcomes(&evaluate(predictor, id)?, m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn detections(&self) -> u64 {
        self.tp + self.fp
    }

    /// `tp / (tp + fp)`, or 1 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        if self.detections() == 0 {
            1.0
        } else {
            self.tp as f64 / self.detections() as f64
        }
    }

    /// `tp / (tp + fn)`, or 0 when no drop occurred.
    pub fn recall(&self) -> f64 {
        let pos = self.tp + self.fn_;
        if pos == 0 {
            0.0
        } else {
            self.tp as f64 / pos as f64
        }
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Tp,
    Fp,
    Tn,
    Fn,
}

/// One evaluated window position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEvent {
    pub position: usize,
    pub c_sw: f64,
    pub a_sw: f64,
    pub verdict: Verdict,
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("threshold {rho} outside [0, 1]")));
    }
    Ok(())
}

/// Classify every full-window position of `stream`.
pub fn event_trace(stream: &Outcomes, rho: f64, stats: &IdStats) -> Result<Vec<WindowEvent>> {
    check_rho(rho)?;
    let mut conf = WindowState::new(stats.m)?;
    let mut acc = WindowState::new(stats.m)?;
    let drop = stats.drop_threshold();
    let mut events = Vec::new();
    for (position, (&c, &ok)) in stream.confidence.iter().zip(&stream.correct).enumerate() {
        let c_sw = conf.push(c);
        let a_sw = acc.push(if ok { 1.0 } else { 0.0 });
        if !conf.is_full() {
            continue;
        }
        let verdict = match (c_sw < rho, a_sw <= drop) {
            (true, true) => Verdict::Tp,
            (true, false) => Verdict::Fp,
            (false, false) => Verdict::Tn,
            (false, true) => Verdict::Fn,
        };
        events.push(WindowEvent {
            position,
            c_sw,
            a_sw,
            verdict,
        });
    }
    Ok(events)
}

/// Event counts over every full-window position of `stream`.
pub fn detect_events(stream: &Outcomes, rho: f64, stats: &IdStats) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for e in event_trace(stream, rho, stats)? {
        match e.verdict {
            Verdict::Tp => counts.tp += 1,
            Verdict::Fp => counts.fp += 1,
            Verdict::Tn => counts.tn += 1,
            Verdict::Fn => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

/// Event trace as JSON lines.
pub fn trace_jsonl(events: &[WindowEvent]) -> Result<String> {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rho: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
}

/// Counts summed over all streams at each threshold.
pub fn sweep_thresholds(streams: &[Outcomes], stats: &IdStats, grid: &[f64]) -> Result<Vec<PrPoint>> {
    if streams.is_empty() {
        return Err(Error::InvalidArgument("threshold sweep needs at least one stream".into()));
    }
    grid.iter()
        .map(|&rho| {
            let mut counts = ConfusionCounts::default();
            for s in streams {
                counts.add(&detect_events(s, rho, stats)?);
            }
            Ok(PrPoint {
                rho,
                counts,
                precision: counts.precision(),
                recall: counts.recall(),
            })
        })
        .collect()
}

/// Area under the swept curve. Thresholds that flag nothing carry no
/// information about precision and are left out; with no usable point the
/// area is 0.
pub fn curve_auprc(points: &[PrPoint]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.counts.detections() > 0)
        .map(|p| (p.recall, p.precision))
        .collect();
    if pts.is_empty() {
        return Ok(0.0);
    }
    auprc(&pts)
}

/// How per-corruption results combine into one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrAggregation {
    /// Sum counts across corruptions per threshold, then integrate once.
    #[default]
    Pooled,
    /// Integrate each corruption's curve, then average the areas.
    PerCorruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftResult {
    pub stats: IdStats,
    pub aggregation: PrAggregation,
    /// Headline score under `aggregation`.
    pub auprc: f64,
    pub pooled_curve: Vec<PrPoint>,
    pub per_corruption: IndexMap<String, f64>,
}

impl DriftResult {
    /// Header `rho,tp,fp,tn,fn,precision,recall`.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("rho,tp,fp,tn,fn,precision,recall\n");
        for p in &self.pooled_curve {
            let c = p.counts;
            let _ = writeln!(s, "{:.1},{},{},{},{},{:.6},{:.6}", p.rho, c.tp, c.fp, c.tn, c.fn_, p.precision, p.recall);
        }
        s
    }

    /// Header `corruption,auprc`.
    pub fn auprc_csv(&self) -> String {
        let mut s = String::from("corruption,auprc\n");
        for (name, v) in &self.per_corruption {
            let _ = writeln!(s, "{name},{v:.6}");
        }
        s
    }
}

/// Accuracy-drop detection over ID-then-CID streams, one per corruption.
/// `id` also supplies the reference statistics.
pub fn accuracy_drop_auprc(
    id: &Outcomes,
    cids: &IndexMap<String, Outcomes>,
    m: usize,
    grid: &[f64],
    aggregation: PrAggregation,
) -> Result<DriftResult> {
    if cids.is_empty() {
        return Err(Error::InvalidArgument("accuracy-drop detection needs at least one corrupted set".into()));
    }
    let stats = IdStats::from_outcomes(id, m)?;
    let streams: Vec<Outcomes> = cids.values().map(|c| id.then(c)).collect();
    let pooled_curve = sweep_thresholds(&streams, &stats, grid)?;
    let mut per_corruption = IndexMap::new();
    for (name, s) in cids.keys().zip(&streams) {
        per_corruption.insert(name.clone(), curve_auprc(&sweep_thresholds(std::slice::from_ref(s), &stats, grid)?)?);
    }
    let auprc = match aggregation {
        PrAggregation::Pooled => curve_auprc(&pooled_curve)?,
        PrAggregation::PerCorruption => per_corruption.values().sum::<f64>() / per_corruption.len() as f64,
    };
    Ok(DriftResult {
        stats,
        aggregation,
        auprc,
        pooled_curve,
        per_corruption,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureScores {
    /// Correct vs incorrect predictions on ID and CID samples.
    pub id_correct_vs_incorrect: f64,
    /// Correct ID predictions vs OOD samples.
    pub id_correct_vs_ood: f64,
}

/// AUROC of confidence on the two failure-detection tasks.
pub fn failure_tasks(id: &PredictionBatch, cid: &PredictionBatch, ood_confidences: &[f64]) -> Result<FailureScores> {
    let pooled = Outcomes::from_batch(id).then(&Outcomes::from_batch(cid));
    let id_correct_vs_incorrect = auroc(&pooled.confidence, &pooled.correct)?;
    let id_out = Outcomes::from_batch(id);
    let mut scores: Vec<f64> = id_out
        .confidence
        .iter()
        .zip(&id_out.correct)
        .filter(|(_, &ok)| ok)
        .map(|(&c, _)| c)
        .collect();
    let n_pos = scores.len();
    scores.extend_from_slice(ood_confidences);
    let positive: Vec<bool> = (0..scores.len()).map(|i| i < n_pos).collect();
    let id_correct_vs_ood = auroc(&scores, &positive)?;
    Ok(FailureScores {
        id_correct_vs_incorrect,
        id_correct_vs_ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_closed_forms() {
        let mut w = WindowState::new(100).unwrap();
        assert_eq!(w.push(1.0), 1.0);
        let mut w = WindowState::new(100).unwrap();
        for _ in 0..250 {
            assert!((w.push(0.3) - 0.3).abs() < 1e-12);
        }
        let mut w = WindowState::new(100).unwrap();
        let mut last = 0.0;
        for i in 0..150 {
            last = w.push((i % 2) as f64);
        }
        assert_eq!(last, 0.5);
        assert!(WindowState::new(0).is_err());
    }

    #[test]
    fn window_tracks_partial_fill() {
        let mut w = WindowState::new(4).unwrap();
        w.push(1.0);
        assert_eq!(w.push(0.0), 0.5);
        assert_eq!(w.filled(), 2);
        assert!(!w.is_full());
    }

    #[test]
    fn perfect_model_has_no_spread() {
        let id = Outcomes::new(vec![0.9; 300], vec![true; 300]).unwrap();
        let s = IdStats::from_outcomes(&id, 100).unwrap();
        assert_eq!((s.mu_id, s.sigma_id), (1.0, 0.0));
        assert!(IdStats::from_outcomes(&Outcomes::new(vec![0.9; 99], vec![true; 99]).unwrap(), 100).is_err());
    }

    #[test]
    fn rho_bounds_checked() {
        let s = Outcomes::new(vec![0.5; 10], vec![true; 10]).unwrap();
        let stats = IdStats {
            mu_id: 1.0,
            sigma_id: 0.0,
            m: 5,
        };
        assert!(detect_events(&s, 1.5, &stats).is_err());
        assert!(detect_events(&s, -0.1, &stats).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let s = Outcomes::new((0..50).map(|i| 0.2 + 0.01 * i as f64).collect(), (0..50).map(|i| i % 3 != 0).collect()).unwrap();
        let stats = IdStats {
            mu_id: 0.8,
            sigma_id: 0.05,
            m: 10,
        };
        let zero = detect_events(&s, 0.0, &stats).unwrap();
        assert_eq!(zero.detections(), 0);
        assert_eq!(zero.total(), 41);
        let one = detect_events(&s, 1.0, &stats).unwrap();
        assert_eq!(one.detections(), 41);
        assert_eq!(ConfusionCounts::default().precision(), 1.0);
    }

    #[test]
    fn constant_confidence_scores_prevalence() {
        let mut correct = vec![true; 400];
        correct.extend((0..400).map(|i| i % 4 == 0));
        let id = Outcomes::new(vec![0.6; 400], correct[..400].to_vec()).unwrap();
        let cid = Outcomes::new(vec![0.6; 400], correct[400..].to_vec()).unwrap();
        let r = accuracy_drop_auprc(&id, &IndexMap::from([("c".to_string(), cid)]), 50, &rho_grid(), PrAggregation::Pooled).unwrap();
        let flagged = r.pooled_curve.last().unwrap().counts;
        let prevalence = (flagged.tp + flagged.fn_) as f64 / flagged.total() as f64;
        assert!((r.auprc - prevalence).abs() < 1e-12);
        assert_eq!(r.pooled_curve.len(), 11);
    }

    #[test]
    fn csv_headers_fixed() {
        let id = Outcomes::new(vec![0.9; 20], vec![true; 20]).unwrap();
        let cid = Outcomes::new(vec![0.1; 20], vec![false; 20]).unwrap();
        let r = accuracy_drop_auprc(
            &id,
            &IndexMap::from([("noise".to_string(), cid)]),
            5,
            &rho_grid(),
            PrAggregation::PerCorruption,
        )
        .unwrap();
        assert!(r.pr_csv().starts_with("rho,tp,fp,tn,fn,precision,recall\n0.0,"));
        assert_eq!(r.auprc_csv().lines().nth(1).unwrap().split(',').next(), Some("noise"));
    }

    #[test]
    fn trace_serialises_one_event_per_line() {
        let s = Outcomes::new(vec![0.5; 6], vec![true; 6]).unwrap();
        let stats = IdStats {
            mu_id: 0.9,
            sigma_id: 0.0,
            m: 3,
        };
        let events = event_trace(&s, 0.7, &stats).unwrap();
        let text = trace_jsonl(&events).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("\"verdict\":\"fp\""));
    }
}
