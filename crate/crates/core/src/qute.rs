//! Early-view ensembles: K early exits train alongside K heads at the end
//! of the trunk. Before every batch each early-view head's depthwise layer
//! is overwritten by its early-exit partner's. At inference the early exits
//! and the original output block are removed and the early-view softmaxes
//! are averaged.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ensemble::{from_member_logits, EnsemblePrediction, Predictor, EVAL_CHUNK};
use crate::graph::presets::{qute_spec, FINAL_EXIT};
use crate::graph::{build_graph, transfer_layer, BlockSpec, ExitKind, Mode, NetworkGraph};
use crate::tensor::{Rng, Tensor};
use crate::train::{train_graph, Objective, TrainConfig, TrainEvent, TrainLog};
use crate::{Error, Result};

/// Early-exit weights `tau` and early-view weights `w_ev[k] = w_ev0 + k·delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tau: Vec<f64>,
    pub w_ev: Vec<f64>,
    pub w_ev0: f64,
    pub delta: f64,
}

pub const DEFAULT_W_EV0: f64 = 3.0;
pub const DEFAULT_DELTA: f64 = 0.5;

impl LossWeights {
    pub fn new(tau: Vec<f64>, w_ev0: f64, delta: f64) -> Self {
        let w_ev = (0..tau.len()).map(|k| w_ev0 + k as f64 * delta).collect();
        Self { tau, w_ev, w_ev0, delta }
    }

    /// `tau_k` = depth index of the k-th early exit's attachment / trunk depth.
    pub fn for_graph(graph: &NetworkGraph, w_ev0: f64, delta: f64) -> Result<Self> {
        Ok(Self::new(depth_ratios(graph, ExitKind::EarlyExit)?, w_ev0, delta))
    }

    pub fn k(&self) -> usize {
        self.tau.len()
    }

    fn exit_weights(&self) -> IndexMap<String, f32> {
        let mut w = IndexMap::new();
        for (k, &t) in self.tau.iter().enumerate() {
            w.insert(ee_name(k), t as f32);
        }
        for (k, &v) in self.w_ev.iter().enumerate() {
            w.insert(ev_name(k), v as f32);
        }
        w.insert(FINAL_EXIT.to_string(), 1.0);
        w
    }
}

/// Relative depth of each exit of `kind`, in spec order.
pub(crate) fn depth_ratios(graph: &NetworkGraph, kind: ExitKind) -> Result<Vec<f64>> {
    let d = graph.depth() as f64;
    graph
        .exits_of(kind)
        .map(|e| {
            graph
                .depth_index(&e.attach_after)
                .map(|i| i as f64 / d)
                .ok_or_else(|| Error::Graph(format!("exit `{}` attaches to unknown block", e.name)))
        })
        .collect()
}

pub fn ee_name(k: usize) -> String {
    format!("ee{}", k + 1)
}

pub fn ev_name(k: usize) -> String {
    format!("ev{}", k + 1)
}

/// Base trunk plus K early exits at `locations` and K early-view heads.
pub fn attach_qute_heads(
    trunk: &[BlockSpec],
    input: [usize; 3],
    classes: usize,
    k: usize,
    locations: &[String],
    rng: &mut Rng,
) -> Result<NetworkGraph> {
    if k != locations.len() {
        return Err(Error::Graph(format!("K = {k} but {} locations given", locations.len())));
    }
    build_graph(qute_spec(trunk, input, classes, locations)?, rng)
}

/// Copy each early exit's depthwise layer into its early-view partner.
pub fn ev_weight_transfer(graph: &mut NetworkGraph) -> Result<()> {
    let mut pairs = Vec::new();
    for ee in graph.exits_of(ExitKind::EarlyExit) {
        let ev = graph
            .exit(ee.partner.as_deref().unwrap_or_default())
            .ok_or_else(|| Error::Graph(format!("early exit `{}` has no partner", ee.name)))?;
        let src = graph.block_params(&transfer_layer(ee)?.name).expect("depthwise has params");
        let dst = graph.block_params(&transfer_layer(ev)?.name).expect("depthwise has params");
        pairs.push((src, dst));
    }
    let params = graph.params_mut();
    for ((sw, sb), (dw, db)) in pairs {
        for (s, d) in [(sw, dw), (sb, db)] {
            let value = params.get(s).value.clone();
            assert_eq!(value.shape(), params.get(d).value.shape(), "transfer partners differ in shape");
            params.get_mut(d).value = value;
        }
    }
    Ok(())
}

/// `Σ tau_k·CE(ee_k) + Σ w_ev_k·CE(ev_k) + CE(final)`.
pub fn qute_loss(exit_ce: &IndexMap<String, f64>, weights: &LossWeights) -> Result<f64> {
    let get = |name: &str| {
        exit_ce
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing loss for exit `{name}`")))
    };
    let mut total = get(FINAL_EXIT)?;
    for (k, &t) in weights.tau.iter().enumerate() {
        total += t * get(&ee_name(k))?;
    }
    for (k, &w) in weights.w_ev.iter().enumerate() {
        total += w * get(&ev_name(k))?;
    }
    Ok(total)
}

/// Train with per-batch transfer and the weighted loss. With `transfer`
/// false the same architecture and loss train without copying weights.
pub fn train_qute_with(
    graph: &mut NetworkGraph,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    weights: &LossWeights,
    transfer: bool,
    hook: &mut dyn FnMut(TrainEvent, &NetworkGraph),
) -> Result<TrainLog> {
    let k = graph.exits_of(ExitKind::EarlyView).count();
    if k != weights.k() || weights.w_ev.len() != k {
        return Err(Error::InvalidArgument(format!(
            "graph has {k} early-view exits, weights cover {}",
            weights.k()
        )));
    }
    let objective = Objective {
        weights: weights.exit_weights(),
        transfer,
        freeze: k > 0,
    };
    train_graph(graph, train, valid, cfg, &objective, &ev_weight_transfer, hook)
}

pub fn train_qute(graph: &mut NetworkGraph, train: &Dataset, valid: &Dataset, cfg: &TrainConfig, weights: &LossWeights) -> Result<TrainLog> {
    train_qute_with(graph, train, valid, cfg, weights, true, &mut |_, _| {})
}

/// Trunk plus early-view exits only, parameters bit-copied.
pub fn strip_for_inference(graph: &NetworkGraph) -> Result<NetworkGraph> {
    graph.with_exits(|e| e.kind == ExitKind::EarlyView, true)
}

/// Mean of the early-view softmaxes.
pub fn qute_predict(stripped: &NetworkGraph, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
    exit_ensemble_predict(stripped, images, |k| k == ExitKind::EarlyView)
}

/// Evaluate and average the exits whose kind passes `member`.
pub(crate) fn exit_ensemble_predict(graph: &NetworkGraph, images: &Tensor, member: impl Fn(ExitKind) -> bool) -> Result<Vec<EnsemblePrediction>> {
    let logits = member_logits(graph, images, member)?;
    let refs: Vec<&Tensor> = logits.iter().collect();
    from_member_logits(&refs)
}

pub(crate) fn member_logits(graph: &NetworkGraph, images: &Tensor, member: impl Fn(ExitKind) -> bool) -> Result<Vec<Tensor>> {
    let names: Vec<String> = graph.spec().exits.iter().filter(|e| member(e.kind)).map(|e| e.name.clone()).collect();
    if names.is_empty() {
        return Err(Error::Graph("graph has no ensemble member exits".into()));
    }
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); names.len()];
    let mut rng = Rng::new(0, 0);
    let n = images.batch();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let out = graph.forward_exits(&images.slice_batch(start, end), Mode::Eval, &mut rng, |e| names.contains(&e.name))?;
        for (i, name) in names.iter().enumerate() {
            parts[i].push(out.logits[name].clone());
        }
        start = end;
    }
    parts
        .iter()
        .map(|p| {
            if p.is_empty() {
                Ok(Tensor::zeros(&[0, graph.classes()]))
            } else {
                Tensor::concat_batch(p)
            }
        })
        .collect()
}

/// Mean of member logits, elementwise.
pub(crate) fn mean_tensor(parts: &[Tensor]) -> Tensor {
    let mut acc = vec![0f64; parts[0].len()];
    for p in parts {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    let k = parts.len() as f64;
    Tensor::new(parts[0].shape().to_vec(), acc.into_iter().map(|v| (v / k) as f32).collect()).expect("same shape")
}

/// A stripped graph used as a predictor.
#[derive(Debug, Clone)]
pub struct QutePredictor {
    pub graph: NetworkGraph,
}

impl QutePredictor {
    pub fn new(trained: &NetworkGraph) -> Result<Self> {
        let graph = if trained.spec().deployed {
            trained.clone()
        } else {
            strip_for_inference(trained)?
        };
        Ok(Self { graph })
    }
}

impl Predictor for QutePredictor {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        qute_predict(&self.graph, images)
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(mean_tensor(&member_logits(&self.graph, images, |k| k == ExitKind::EarlyView)?)))
    }
}
