//! Mini-batch training loop shared by every method.
//!
//! Each batch: optional weight transfer, forward through all exits, one
//! weighted softmax cross-entropy per exit, backward, Adam step. Methods
//! differ only in the per-exit weights, whether transfer runs, and whether
//! the trunk is frozen at the end.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset};
use crate::ensemble::EVAL_CHUNK;
use crate::graph::{Mode, NetworkGraph};
use crate::tensor::{adam_step, lr_schedule, ops, AdamConfig, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f32,
    pub lr_decay: f32,
    /// Fraction of final epochs with the trunk frozen.
    pub freeze_fraction: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            initial_lr: 0.001,
            lr_decay: 0.99,
            freeze_fraction: 0.10,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.freeze_fraction) {
            return Err(Error::InvalidArgument(format!("freeze_fraction {} outside [0, 1)", self.freeze_fraction)));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("initial_lr {} must be positive", self.initial_lr)));
        }
        Ok(())
    }

    /// First 0-indexed epoch with the trunk frozen: `ceil((1 - f) · epochs)`.
    pub fn freeze_epoch(&self) -> usize {
        ((1.0 - self.freeze_fraction) * self.epochs as f64 - 1e-9).ceil() as usize
    }
}

/// Per-exit loss weights plus method switches.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: IndexMap<String, f32>,
    /// Copy early-exit transfer layers into their early-view partners before each batch.
    pub transfer: bool,
    /// Freeze the trunk for the last `freeze_fraction` of epochs.
    pub freeze: bool,
}

/// Events reported to an instrumentation hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainEvent {
    /// After transfer, before the forward pass.
    BatchStart {
        epoch: usize,
        batch: usize,
    },
    EpochEnd {
        epoch: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub exit: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Unweighted cross-entropy of every batch, per exit.
    pub batch_losses: IndexMap<String, Vec<f64>>,
    pub batches_per_epoch: usize,
}

impl TrainLog {
    /// CSV with header `epoch,exit,split,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,exit,split,loss,accuracy\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.epoch, r.exit, r.split, r.loss, r.accuracy);
        }
        s
    }

    pub fn record(&self, epoch: usize, exit: &str, split: &str) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch && r.exit == exit && r.split == split)
    }
}

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5u64 << 32;
const AUGMENT_STREAM: u64 = 0xa0u64 << 32;
const DROPOUT_STREAM: u64 = 0xd0u64 << 32;

/// Rng for parameter initialisation of a model trained with `seed`.
pub fn init_rng(seed: u64) -> Rng {
    Rng::new(seed, INIT_STREAM)
}

/// Train `graph` in place. `hook` sees the graph at every batch start and epoch end.
pub fn train_graph(
    graph: &mut NetworkGraph,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    objective: &Objective,
    transfer: &dyn Fn(&mut NetworkGraph) -> Result<()>,
    hook: &mut dyn FnMut(TrainEvent, &NetworkGraph),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for name in objective.weights.keys() {
        if graph.exit(name).is_none() {
            return Err(Error::InvalidArgument(format!("loss weight for unknown exit `{name}`")));
        }
    }
    let adam = AdamConfig::default();
    let aug = AugmentConfig::default();
    let mut step = 0u64;
    let n = train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut log = TrainLog {
        batches_per_epoch: batches,
        ..Default::default()
    };
    let freeze_at = if objective.freeze { cfg.freeze_epoch() } else { usize::MAX };
    graph.set_trunk_trainable(true);

    for epoch in 0..cfg.epochs {
        if epoch >= freeze_at {
            graph.set_trunk_trainable(false);
        }
        let lr = lr_schedule(epoch, cfg.initial_lr, cfg.lr_decay);
        let order = Rng::new(cfg.seed, SHUFFLE_STREAM | epoch as u64).permutation(n);
        let mut aug_rng = Rng::new(cfg.seed, AUGMENT_STREAM | epoch as u64);
        let mut drop_rng = Rng::new(cfg.seed, DROPOUT_STREAM | epoch as u64);
        let mut sums: IndexMap<String, (f64, usize)> = IndexMap::new();

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if objective.transfer {
                transfer(graph)?;
            }
            hook(TrainEvent::BatchStart { epoch, batch: b }, graph);
            let mut x = train.tensor(idx);
            if cfg.augment {
                x = augment(&x, &aug, &mut aug_rng);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let out = graph.forward_exits(&x, Mode::Train, &mut drop_rng, |e| objective.weights.contains_key(&e.name))?;
            let mut grads = IndexMap::new();
            let mut total = 0.0;
            for (name, logits) in &out.logits {
                let w = objective.weights[name];
                let (ce, g) = ops::softmax_cross_entropy(logits, &labels, w)?;
                if !ce.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("loss at exit `{name}`, epoch {epoch}, batch {b}"),
                    });
                }
                total += w as f64 * ce;
                let correct = count_correct(logits, &labels);
                let e = sums.entry(name.clone()).or_default();
                e.0 += ce * idx.len() as f64;
                e.1 += correct;
                log.batch_losses.entry(name.clone()).or_default().push(ce);
                grads.insert(name.clone(), g);
            }
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("total loss, epoch {epoch}, batch {b}"),
                });
            }
            graph.zero_grads();
            graph.backward(&out, &grads)?;
            step += 1;
            adam_step(graph.params_mut(), lr, adam, step);
            for (name, p) in graph.params().iter() {
                if !p.value.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("parameter `{name}` after step {step}"),
                    });
                }
            }
        }
        for (name, (loss, correct)) in &sums {
            log.records.push(EpochRecord {
                epoch,
                exit: name.clone(),
                split: "train".into(),
                loss: loss / n as f64,
                accuracy: *correct as f64 / n as f64,
            });
        }
        if !valid.is_empty() {
            let logits = eval_logits(graph, valid)?;
            for name in objective.weights.keys() {
                let l = &logits[name];
                let probs = ops::softmax(l);
                log.records.push(EpochRecord {
                    epoch,
                    exit: name.clone(),
                    split: "valid".into(),
                    loss: ops::cross_entropy(&probs, valid.labels())?,
                    accuracy: count_correct(l, valid.labels()) as f64 / valid.len() as f64,
                });
            }
        }
        hook(TrainEvent::EpochEnd { epoch }, graph);
    }
    graph.set_trunk_trainable(true);
    Ok(log)
}

/// Eval-mode logits for every exit over a whole dataset.
pub fn eval_logits(graph: &NetworkGraph, ds: &Dataset) -> Result<IndexMap<String, Tensor>> {
    graph.predict_logits(&ds.all_tensor(), EVAL_CHUNK, Mode::Eval, &mut Rng::new(0, 0))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count()
}
