//! Multi-exit network graphs.
//!
//! A graph is a linear trunk of blocks plus any number of exits. Each exit
//! reads exactly one trunk activation and runs its own head blocks down to
//! class logits. The trunk is evaluated once per forward pass and shared by
//! every exit.

mod accounting;
mod checkpoint;
pub mod presets;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tensor::{NodeId, Padding, ParamId, ParamStore, Rng, Tape, Tensor};
use crate::{Error, Result};

// =============================================================================
// Specs
// =============================================================================

/// The closed set of layer kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    DepthwiseConv2d {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    /// 1×1 convolution.
    PointwiseConv2d {
        filters: usize,
    },
    /// Fully connected; a feature-map input is flattened.
    Dense {
        units: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Dropout {
        rate: f32,
    },
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::PointwiseConv2d { .. } | LayerKind::Dense { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl BlockSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }
}

/// Role of an exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    /// Training-only early exit whose transfer layer feeds its EV partner.
    EarlyExit,
    /// Early-view exit after the last trunk block; an inference ensemble member.
    EarlyView,
    /// The network's original output block.
    Final,
    /// Early exit that is itself an inference-time ensemble member
    /// (multi-exit ensembles without weight transfer).
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSpec {
    pub name: String,
    pub attach_after: String,
    pub kind: ExitKind,
    pub head: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<String>,
}

/// Full architecture description; serialised verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub trunk: Vec<BlockSpec>,
    pub exits: Vec<ExitSpec>,
    /// Set on inference-stripped graphs: early exits are absent, so early-view
    /// exits may reference partners that no longer exist.
    #[serde(default)]
    pub deployed: bool,
}

/// Forward-pass behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, tape kept for backward.
    Train,
    /// Dropout off, no tape.
    Eval,
    /// Dropout active at inference (MC dropout), no tape.
    EvalWithDropout,
}

// =============================================================================
// Graph
// =============================================================================

#[derive(Debug, Clone, PartialEq)]
struct Compiled {
    kind: LayerKind,
    params: Option<(ParamId, ParamId)>,
    out_shape: Vec<usize>,
}

/// A built network: spec, parameters and per-block metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    spec: GraphSpec,
    params: ParamStore,
    blocks: HashMap<String, Compiled>,
    trunk_params: Vec<ParamId>,
    depth: usize,
}

/// Logits for every exit plus (in training mode) the tape that produced them.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: IndexMap<String, Tensor>,
    tape: Option<Tape>,
    exit_nodes: IndexMap<String, NodeId>,
}

impl ForwardOutput {
    pub fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }
}

/// Build a graph from a spec, initialising weights from `rng`
/// (He-uniform for convolutions, Glorot-uniform for dense layers, zero bias).
pub fn build_graph(spec: GraphSpec, rng: &mut Rng) -> Result<NetworkGraph> {
    validate_topology(&spec)?;
    let mut params = ParamStore::new();
    let mut blocks = HashMap::new();
    let mut trunk_params = Vec::new();
    let mut act_shapes: HashMap<&str, Vec<usize>> = HashMap::new();

    let mut shape = spec.input.to_vec();
    for b in &spec.trunk {
        let c = compile_block(b, &shape, &mut params, rng)?;
        if let Some((w, bias)) = c.params {
            trunk_params.extend([w, bias]);
        }
        shape = c.out_shape.clone();
        act_shapes.insert(&b.name, shape.clone());
        blocks.insert(b.name.clone(), c);
    }
    for e in &spec.exits {
        let mut shape = act_shapes[e.attach_after.as_str()].clone();
        for b in &e.head {
            let c = compile_block(b, &shape, &mut params, rng)?;
            shape = c.out_shape.clone();
            blocks.insert(b.name.clone(), c);
        }
        if shape != [spec.classes] {
            return Err(Error::Graph(format!(
                "exit `{}` produces shape {:?}, expected [{}]",
                e.name, shape, spec.classes
            )));
        }
    }
    let depth = spec.trunk.iter().filter(|b| b.kind.has_params()).count();
    Ok(NetworkGraph {
        spec,
        params,
        blocks,
        trunk_params,
        depth,
    })
}

fn validate_topology(spec: &GraphSpec) -> Result<()> {
    let err = |m: String| Err(Error::Graph(m));
    if spec.trunk.is_empty() {
        return err("trunk is empty".into());
    }
    if spec.classes < 2 {
        return err(format!("need at least 2 classes, got {}", spec.classes));
    }
    let mut names = HashSet::new();
    for b in spec.trunk.iter().chain(spec.exits.iter().flat_map(|e| e.head.iter())) {
        if !names.insert(b.name.as_str()) {
            return err(format!("duplicate block name `{}`", b.name));
        }
        if let LayerKind::Dropout { rate } = b.kind {
            if !(0.0..1.0).contains(&rate) {
                return err(format!("dropout rate {rate} outside [0, 1) in `{}`", b.name));
            }
        }
    }
    let mut exit_names = HashSet::new();
    for e in &spec.exits {
        if !exit_names.insert(e.name.as_str()) {
            return err(format!("duplicate exit name `{}`", e.name));
        }
        if e.head.is_empty() {
            return err(format!("exit `{}` has no head blocks", e.name));
        }
    }
    let last = spec.trunk.last().map(|b| b.name.as_str()).unwrap_or_default();
    let by_name: HashMap<&str, &ExitSpec> = spec.exits.iter().map(|e| (e.name.as_str(), e)).collect();
    for e in &spec.exits {
        if !spec.trunk.iter().any(|b| b.name == e.attach_after) {
            return err(format!("exit `{}` attaches after unknown block `{}`", e.name, e.attach_after));
        }
        match e.kind {
            ExitKind::Final | ExitKind::Auxiliary => {
                if e.partner.is_some() {
                    return err(format!("exit `{}` of kind {:?} cannot have a partner", e.name, e.kind));
                }
                if e.kind == ExitKind::Final && e.attach_after != last {
                    return err(format!("final exit `{}` must attach after `{last}`", e.name));
                }
            }
            ExitKind::EarlyView => {
                if e.attach_after != last {
                    return err(format!("early-view exit `{}` must attach after the last trunk block `{last}`", e.name));
                }
                match e.partner.as_deref().map(|p| by_name.get(p)) {
                    Some(Some(p)) if p.kind == ExitKind::EarlyExit && p.partner.as_deref() == Some(&e.name) => {}
                    Some(None) | None if spec.deployed => {}
                    _ => return err(format!("early-view exit `{}` lacks a matching early-exit partner", e.name)),
                }
                transfer_layer(e)?;
            }
            ExitKind::EarlyExit => {
                if spec.deployed {
                    return err(format!("deployed graph still contains early exit `{}`", e.name));
                }
                match e.partner.as_deref().and_then(|p| by_name.get(p)) {
                    Some(p) if p.kind == ExitKind::EarlyView && p.partner.as_deref() == Some(&e.name) => {}
                    _ => return err(format!("early exit `{}` lacks a matching early-view partner", e.name)),
                }
                transfer_layer(e)?;
            }
        }
    }
    Ok(())
}

/// The head block whose weights are copied from early exit to early view:
/// the first depthwise convolution in the head.
pub fn transfer_layer(exit: &ExitSpec) -> Result<&BlockSpec> {
    exit.head
        .iter()
        .find(|b| matches!(b.kind, LayerKind::DepthwiseConv2d { .. }))
        .ok_or_else(|| Error::Graph(format!("exit `{}` has no depthwise transfer layer", exit.name)))
}

fn uniform_init(shape: &[usize], limit: f32, rng: &mut Rng) -> Tensor {
    Tensor::random_uniform(shape, -limit, limit, rng)
}

fn compile_block(b: &BlockSpec, input: &[usize], params: &mut ParamStore, rng: &mut Rng) -> Result<Compiled> {
    let bad = |m: &str| Error::Graph(format!("block `{}`: {m} (input shape {input:?})", b.name));
    let spatial = |k: usize, s: usize, p: Padding| -> Result<(usize, usize)> {
        let [_, h, w] = input else {
            return Err(bad("expects a C×H×W input"));
        };
        let (oh, _) = crate::tensor::ops::conv_out_dim(*h, k, s, p)?;
        let (ow, _) = crate::tensor::ops::conv_out_dim(*w, k, s, p)?;
        Ok((oh, ow))
    };
    let mut add = |wshape: Vec<usize>, bshape: usize, limit: f32| {
        let w = params.insert(format!("{}.weight", b.name), uniform_init(&wshape, limit, rng));
        let bias = params.insert(format!("{}.bias", b.name), Tensor::zeros(&[bshape]));
        Some((w, bias))
    };
    let (p, out_shape) = match b.kind {
        LayerKind::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        } => {
            let (oh, ow) = spatial(kernel, stride, padding)?;
            let fan_in = input[0] * kernel * kernel;
            let p = add(vec![filters, input[0], kernel, kernel], filters, (6.0 / fan_in as f32).sqrt());
            (p, vec![filters, oh, ow])
        }
        LayerKind::PointwiseConv2d { filters } => {
            let (oh, ow) = spatial(1, 1, Padding::Valid)?;
            let p = add(vec![filters, input[0], 1, 1], filters, (6.0 / input[0] as f32).sqrt());
            (p, vec![filters, oh, ow])
        }
        LayerKind::DepthwiseConv2d { kernel, stride, padding } => {
            let (oh, ow) = spatial(kernel, stride, padding)?;
            let p = add(vec![input[0], 1, kernel, kernel], input[0], (6.0 / (kernel * kernel) as f32).sqrt());
            (p, vec![input[0], oh, ow])
        }
        LayerKind::Dense { units } => {
            let f: usize = input.iter().product();
            let p = add(vec![f, units], units, (6.0 / (f + units) as f32).sqrt());
            (p, vec![units])
        }
        LayerKind::Relu | LayerKind::Dropout { .. } => (None, input.to_vec()),
        LayerKind::MaxPool2 => {
            let [c, h, w] = input else {
                return Err(bad("expects a C×H×W input"));
            };
            if *h < 2 || *w < 2 {
                return Err(bad("max_pool2 needs at least 2×2"));
            }
            (None, vec![*c, h / 2, w / 2])
        }
        LayerKind::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(bad("expects a C×H×W input"));
            }
            (None, vec![input[0]])
        }
    };
    Ok(Compiled {
        kind: b.kind.clone(),
        params: p,
        out_shape,
    })
}

impl NetworkGraph {
    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of weight-bearing trunk blocks (D).
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Weight-bearing trunk blocks up to and including `block`.
    pub fn depth_index(&self, block: &str) -> Option<usize> {
        let pos = self.spec.trunk.iter().position(|b| b.name == block)?;
        Some(self.spec.trunk[..=pos].iter().filter(|b| b.kind.has_params()).count())
    }

    pub fn exit(&self, name: &str) -> Option<&ExitSpec> {
        self.spec.exits.iter().find(|e| e.name == name)
    }

    pub fn exits_of(&self, kind: ExitKind) -> impl Iterator<Item = &ExitSpec> {
        self.spec.exits.iter().filter(move |e| e.kind == kind)
    }

    /// Parameter ids belonging to trunk blocks.
    pub fn trunk_param_ids(&self) -> &[ParamId] {
        &self.trunk_params
    }

    /// Weight and bias ids of a named block.
    pub fn block_params(&self, block: &str) -> Option<(ParamId, ParamId)> {
        self.blocks.get(block).and_then(|c| c.params)
    }

    pub fn block_output_shape(&self, block: &str) -> Option<&[usize]> {
        self.blocks.get(block).map(|c| c.out_shape.as_slice())
    }

    /// Mark every trunk parameter (non-)trainable.
    pub fn set_trunk_trainable(&mut self, trainable: bool) {
        for &id in &self.trunk_params {
            self.params.get_mut(id).trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    fn apply(&self, tape: &mut Tape, x: NodeId, block: &BlockSpec, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        let c = &self.blocks[&block.name];
        match c.kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                let (w, b) = c.params.expect("conv has params");
                tape.conv2d(x, &self.params, w, b, stride, padding)
            }
            LayerKind::PointwiseConv2d { .. } => {
                let (w, b) = c.params.expect("conv has params");
                tape.conv2d(x, &self.params, w, b, 1, Padding::Valid)
            }
            LayerKind::DepthwiseConv2d { stride, padding, .. } => {
                let (w, b) = c.params.expect("depthwise has params");
                tape.depthwise(x, &self.params, w, b, stride, padding)
            }
            LayerKind::Dense { .. } => {
                let (w, b) = c.params.expect("dense has params");
                tape.dense(x, &self.params, w, b)
            }
            LayerKind::Relu => tape.relu(x),
            LayerKind::MaxPool2 => tape.max_pool2(x),
            LayerKind::GlobalAvgPool => tape.global_avg_pool(x),
            LayerKind::Dropout { rate } => tape.dropout(x, rate, mode != Mode::Eval, rng),
        }
    }

    /// Run the trunk once and every exit head; returns logits keyed by exit
    /// name in spec order. `rng` drives dropout masks only.
    pub fn forward_all_exits(&self, batch: &Tensor, mode: Mode, rng: &mut Rng) -> Result<ForwardOutput> {
        self.forward_exits(batch, mode, rng, |_| true)
    }

    /// Like [`NetworkGraph::forward_all_exits`] restricted to exits accepted by `keep`.
    pub fn forward_exits(&self, batch: &Tensor, mode: Mode, rng: &mut Rng, keep: impl Fn(&ExitSpec) -> bool) -> Result<ForwardOutput> {
        let want: Vec<usize> = std::iter::once(batch.batch()).chain(self.spec.input).collect();
        if batch.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward_all_exits",
                lhs: want,
                rhs: batch.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let mut x = tape.leaf(batch.clone())?;
        let mut acts: HashMap<&str, NodeId> = HashMap::new();
        for b in &self.spec.trunk {
            x = self.apply(&mut tape, x, b, mode, rng)?;
            acts.insert(&b.name, x);
        }
        let mut logits = IndexMap::new();
        let mut exit_nodes = IndexMap::new();
        for e in self.spec.exits.iter().filter(|e| keep(e)) {
            let mut h = acts[e.attach_after.as_str()];
            for b in &e.head {
                h = self.apply(&mut tape, h, b, mode, rng)?;
            }
            logits.insert(e.name.clone(), tape.value(h).clone());
            exit_nodes.insert(e.name.clone(), h);
        }
        Ok(ForwardOutput {
            logits,
            tape: (mode == Mode::Train).then_some(tape),
            exit_nodes,
        })
    }

    /// Backpropagate per-exit logit gradients from a training-mode forward pass.
    pub fn backward(&mut self, out: &ForwardOutput, logit_grads: &IndexMap<String, Tensor>) -> Result<()> {
        let tape = out.tape.as_ref().ok_or(Error::NoTape)?;
        let mut seeds = Vec::with_capacity(logit_grads.len());
        for (name, g) in logit_grads {
            let node = *out
                .exit_nodes
                .get(name)
                .ok_or_else(|| Error::Graph(format!("no forward output for exit `{name}`")))?;
            seeds.push((node, g.clone()));
        }
        tape.backward(seeds, &mut self.params)?;
        Ok(())
    }

    /// Evaluate in fixed-size chunks and concatenate per-exit logits.
    pub fn predict_logits(&self, images: &Tensor, batch_size: usize, mode: Mode, rng: &mut Rng) -> Result<IndexMap<String, Tensor>> {
        let n = images.batch();
        let mut parts: IndexMap<String, Vec<Tensor>> = IndexMap::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size.max(1)).min(n);
            let out = self.forward_all_exits(&images.slice_batch(start, end), mode, rng)?;
            for (k, v) in out.logits {
                parts.entry(k).or_default().push(v);
            }
            start = end;
        }
        let mut merged = IndexMap::new();
        for e in &self.spec.exits {
            let t = match parts.get(&e.name) {
                Some(p) => Tensor::concat_batch(p)?,
                None => Tensor::zeros(&[0, self.spec.classes]),
            };
            merged.insert(e.name.clone(), t);
        }
        Ok(merged)
    }

    /// Copy of this graph restricted to the given exits (parameters bit-copied).
    pub(crate) fn with_exits(&self, keep: impl Fn(&ExitSpec) -> bool, deployed: bool) -> Result<NetworkGraph> {
        let mut spec = self.spec.clone();
        spec.exits.retain(|e| keep(e));
        spec.deployed = deployed || spec.deployed;
        let mut g = build_graph(spec, &mut Rng::new(0, 0))?;
        for (name, p) in g.params.iter_mut() {
            let src = self.params.by_name(name).expect("subset of source params");
            p.value = src.value.clone();
            p.trainable = src.trainable;
        }
        Ok(g)
    }
}
