//! Brute-force scalar references for the metrics, written independently of
//! the library: explicit interval tests for bins, a full confusion matrix
//! for F1, and all positive/negative pairs for AUROC.

use std::collections::BTreeMap;

use qutelab::metrics::{auprc, auroc, brier, ece, f1_weighted, nll, PredictionBatch};
use qutelab::tensor::Rng;

pub fn ece_oracle(rows: &[Vec<f64>], labels: &[usize], m: usize) -> f64 {
    let n = rows.len() as f64;
    let mut total = 0.0;
    for b in 0..m {
        let (lo, hi) = (b as f64 / m as f64, (b + 1) as f64 / m as f64);
        let mut count = 0.0;
        let mut hits = 0.0;
        let mut conf = 0.0;
        for (row, &y) in rows.iter().zip(labels) {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let c = row[best];
            let in_bin = if b == 0 { c <= hi } else { c > lo && c <= hi };
            if in_bin {
                count += 1.0;
                conf += c;
                if best == y {
                    hits += 1.0;
                }
            }
        }
        if count > 0.0 {
            total += count / n * (hits / count - conf / count).abs();
        }
    }
    total
}

pub fn brier_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    let mut cells = 0.0;
    for (row, &y) in rows.iter().zip(labels) {
        for (j, p) in row.iter().enumerate() {
            let d = p - f64::from(u8::from(j == y));
            s += d * d;
            cells += 1.0;
        }
    }
    s / cells
}

pub fn nll_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let s: f64 = rows.iter().zip(labels).map(|(r, &y)| -(r[y].clamp(1e-12, 1.0)).ln()).sum();
    s / rows.len() as f64
}

#[allow(clippy::needless_range_loop)]
pub fn f1_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let l = rows[0].len();
    let mut confusion = vec![vec![0.0f64; l]; l];
    for (row, &y) in rows.iter().zip(labels) {
        let mut best = 0;
        for j in 1..l {
            if row[j] > row[best] {
                best = j;
            }
        }
        confusion[y][best] += 1.0;
    }
    let n = rows.len() as f64;
    let mut weighted = 0.0;
    for c in 0..l {
        let tp = confusion[c][c];
        let predicted: f64 = (0..l).map(|r| confusion[r][c]).sum();
        let actual: f64 = confusion[c].iter().sum();
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += f1 * actual / n;
    }
    weighted
}

pub fn auroc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Trapezoids over recall-ordered points, best precision per recall, with
/// a flat start at recall 0.
pub fn auprc_oracle(points: &[(f64, f64)]) -> f64 {
    let mut best: BTreeMap<u64, f64> = BTreeMap::new();
    for &(r, p) in points {
        // Non-negative floats order like their bit patterns.
        let e = best.entry(r.to_bits()).or_insert(p);
        if p > *e {
            *e = p;
        }
    }
    let curve: Vec<(f64, f64)> = best.into_iter().map(|(k, p)| (f64::from_bits(k), p)).collect();
    let mut area = curve[0].0 * curve[0].1;
    for k in 1..curve.len() {
        let (r0, p0) = curve[k - 1];
        let (r1, p1) = curve[k];
        area += (r1 - r0) * 0.5 * (p0 + p1);
    }
    area
}

/// One random batch: rows from tempered random logits, labels that agree
/// with the argmax most of the time, some rows quantised to force ties.
pub fn random_batch(rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = 1 + rng.below(1000);
    let l = 2 + rng.below(9);
    let temp = 0.2 + 4.0 * rng.next_f64();
    let quantise = rng.next_f64() < 0.3;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..l).map(|_| rng.next_f64() * 4.0 / temp).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut row: Vec<f64> = e.iter().map(|v| v / s).collect();
        if quantise {
            // Snap to a 1/8 grid while keeping a valid distribution.
            let mut q: Vec<f64> = row.iter().map(|p| (p * 8.0).floor() / 8.0).collect();
            let rest = 1.0 - q.iter().sum::<f64>();
            q[0] += rest;
            row = q;
        }
        let top = (0..l).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        labels.push(if rng.next_f64() < 0.7 { top } else { rng.below(l) });
        rows.push(row);
    }
    (rows, labels)
}

/// Largest absolute disagreement per metric over `batches` random batches.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleGaps {
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub batches: usize,
}

impl OracleGaps {
    pub fn worst(&self) -> f64 {
        [self.ece, self.brier, self.nll, self.f1, self.auroc, self.auprc]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn metric_oracle_gaps(batches: usize, seed: u64) -> OracleGaps {
    let mut rng = Rng::new(seed, 0x0ac1e);
    let mut g = OracleGaps::default();
    while g.batches < batches {
        let (rows, labels) = random_batch(&mut rng);
        let batch = PredictionBatch::new(rows.clone(), labels.clone()).expect("valid batch");
        let m = 1 + rng.below(20);
        g.ece = g.ece.max((ece(&batch, m).unwrap().0 - ece_oracle(&rows, &labels, m)).abs());
        g.brier = g.brier.max((brier(&batch) - brier_oracle(&rows, &labels)).abs());
        g.nll = g.nll.max((nll(&batch) - nll_oracle(&rows, &labels)).abs());
        g.f1 = g.f1.max((f1_weighted(&batch) - f1_oracle(&rows, &labels)).abs());

        let conf = batch.confidences();
        let correct = batch.correct();
        if correct.iter().any(|&c| c) && correct.iter().any(|&c| !c) {
            g.auroc = g.auroc.max((auroc(&conf, &correct).unwrap() - auroc_oracle(&conf, &correct)).abs());
        }
        let k = 1 + rng.below(30);
        let points: Vec<(f64, f64)> = (0..k)
            .map(|_| {
                let r = if rng.next_f64() < 0.3 {
                    rng.below(5) as f64 / 4.0
                } else {
                    rng.next_f64()
                };
                (r, rng.next_f64())
            })
            .collect();
        g.auprc = g.auprc.max((auprc(&points).unwrap() - auprc_oracle(&points)).abs());
        g.batches += 1;
    }
    g
}
