//! Ensemble predictions shared by every method.

use crate::tensor::{ops, Tensor};
use crate::{Error, Result};

/// One sample's member distributions and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// `K` probability rows of length `L`.
    pub member_probs: Vec<Vec<f64>>,
    pub mean_probs: Vec<f64>,
    pub confidence: f64,
    pub predicted_class: usize,
}

impl EnsemblePrediction {
    /// Average member rows in 64-bit.
    pub fn from_members(member_probs: Vec<Vec<f64>>) -> Result<Self> {
        let first = member_probs
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble has no members".into()))?;
        let l = first.len();
        if member_probs.iter().any(|m| m.len() != l) {
            return Err(Error::InvalidArgument("ensemble members disagree on class count".into()));
        }
        let k = member_probs.len() as f64;
        let mut mean = vec![0f64; l];
        for m in &member_probs {
            for (acc, &p) in mean.iter_mut().zip(m) {
                *acc += p;
            }
        }
        mean.iter_mut().for_each(|v| *v /= k);
        let (predicted_class, confidence) = argmax(&mean);
        Ok(Self {
            member_probs,
            mean_probs: mean,
            confidence,
            predicted_class,
        })
    }

    pub fn members(&self) -> usize {
        self.member_probs.len()
    }
}

/// First index of the maximum and the maximum itself.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Softmax every member's logits and average per sample.
pub fn from_member_logits(members: &[&Tensor]) -> Result<Vec<EnsemblePrediction>> {
    let first = members.first().ok_or_else(|| Error::InvalidArgument("ensemble has no members".into()))?;
    let n = first.batch();
    for m in members {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "ensemble members",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    (0..n)
        .map(|i| EnsemblePrediction::from_members(members.iter().map(|m| ops::softmax_row(m.row(i))).collect()))
        .collect()
}

/// Anything that maps images to ensemble predictions. Labels never reach it.
pub trait Predictor: Sync {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>>;

    /// Mean member logits, for temperature scaling. `None` when the method
    /// has no logit-space output.
    fn pooled_logits(&self, _images: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        (**self).predict(images)
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        (**self).pooled_logits(images)
    }
}

/// Samples per forward call when evaluating whole datasets.
pub const EVAL_CHUNK: usize = 500;
