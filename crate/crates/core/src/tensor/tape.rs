//! Reverse-mode tape over a DAG of tensors.
//!
//! Every forward op appends a node holding its output value plus whatever
//! the backward rule needs (pool argmax, dropout mask). Nodes are appended
//! in topological order, so `backward` is a single reverse sweep. A node
//! read by several consumers (a trunk activation feeding several exits)
//! receives the sum of their gradients.

use super::ops::{self, Padding};
use super::{ParamId, ParamStore, Rng, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: Padding,
    },
    Dense {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f32>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    track_leaves: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also compute gradients with respect to leaf (input) nodes; they are
    /// returned by [`Tape::backward`].
    pub fn track_leaf_grads(&mut self) {
        self.track_leaves = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<NodeId> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "input")
    }

    pub fn conv2d(&mut self, input: NodeId, params: &ParamStore, weight: ParamId, bias: ParamId, stride: usize, padding: Padding) -> Result<NodeId> {
        let y = ops::conv2d(self.value(input), &params.get(weight).value, &params.get(bias).value, stride, padding)?;
        self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    pub fn depthwise(
        &mut self,
        input: NodeId,
        params: &ParamStore,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let y = ops::depthwise_conv2d(self.value(input), &params.get(weight).value, &params.get(bias).value, stride, padding)?;
        self.push(
            y,
            Op::Depthwise {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "depthwise_conv2d",
        )
    }

    pub fn dense(&mut self, input: NodeId, params: &ParamStore, weight: ParamId, bias: ParamId) -> Result<NodeId> {
        let y = ops::dense(self.value(input), &params.get(weight).value, &params.get(bias).value)?;
        self.push(y, Op::Dense { input, weight, bias }, "dense")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu { input }, "relu")
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (y, argmax) = ops::max_pool2(self.value(input))?;
        self.push(y, Op::MaxPool2 { input, argmax }, "max_pool2")
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::global_avg_pool(self.value(input))?;
        self.push(y, Op::GlobalAvgPool { input }, "global_avg_pool")
    }

    /// Inverted dropout. With `active == false` this is the identity.
    pub fn dropout(&mut self, input: NodeId, rate: f32, active: bool, rng: &mut Rng) -> Result<NodeId> {
        let x = self.value(input);
        let mask = if active && rate > 0.0 {
            ops::dropout_mask(x.len(), rate, rng)
        } else {
            vec![1.0; x.len()]
        };
        let y = ops::apply_mask(x, &mask);
        self.push(y, Op::Dropout { input, mask }, "dropout")
    }

    /// Propagate `seeds` (node, d loss / d node) back through the tape and
    /// accumulate parameter gradients into `params`. Parameters marked
    /// non-trainable still receive gradients; the optimizer skips them.
    ///
    /// Returns leaf gradients when [`Tape::track_leaf_grads`] was requested.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>, params: &mut ParamStore) -> Result<Vec<(NodeId, Tensor)>> {
        if self.nodes.is_empty() {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut leaf_grads = Vec::new();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "backward seed",
                    lhs: self.value(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads[id], g);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let (input, gx) = match &node.op {
                Op::Leaf => {
                    if self.track_leaves {
                        leaf_grads.push((id, gy));
                    }
                    continue;
                }
                &Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (mut gw, mut gb) = take_grads(params, weight, bias);
                    let w = &params.get(weight).value;
                    let gx = ops::conv2d_backward(self.value(input), w, stride, padding, &gy, &mut gw, &mut gb, self.wants(input))?;
                    put_grads(params, weight, bias, gw, gb);
                    (input, gx)
                }
                &Op::Depthwise {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (mut gw, mut gb) = take_grads(params, weight, bias);
                    let w = &params.get(weight).value;
                    let gx = ops::depthwise_conv2d_backward(self.value(input), w, stride, padding, &gy, &mut gw, &mut gb, self.wants(input))?;
                    put_grads(params, weight, bias, gw, gb);
                    (input, gx)
                }
                &Op::Dense { input, weight, bias } => {
                    let (mut gw, mut gb) = take_grads(params, weight, bias);
                    let w = &params.get(weight).value;
                    let gx = ops::dense_backward(self.value(input), w, &gy, &mut gw, &mut gb, self.wants(input))?;
                    put_grads(params, weight, bias, gw, gb);
                    (input, gx)
                }
                &Op::Relu { input } => (input, Some(ops::relu_backward(self.value(input), &gy))),
                Op::MaxPool2 { input, argmax } => (*input, Some(ops::max_pool2_backward(self.value(*input).shape(), argmax, &gy))),
                &Op::GlobalAvgPool { input } => (input, Some(ops::global_avg_pool_backward(self.value(input).shape(), &gy))),
                Op::Dropout { input, mask } => (*input, Some(ops::apply_mask(&gy, mask))),
            };
            if let Some(gx) = gx {
                accumulate(&mut grads[input], gx);
            }
        }
        leaf_grads.reverse();
        Ok(leaf_grads)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.track_leaves || !matches!(self.nodes[id].op, Op::Leaf)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn take_grads(params: &mut ParamStore, w: ParamId, b: ParamId) -> (Tensor, Tensor) {
    let gw = std::mem::replace(&mut params.get_mut(w).grad, Tensor::zeros(&[0]));
    let gb = std::mem::replace(&mut params.get_mut(b).grad, Tensor::zeros(&[0]));
    (gw, gb)
}

fn put_grads(params: &mut ParamStore, w: ParamId, b: ParamId, gw: Tensor, gb: Tensor) {
    params.get_mut(w).grad = gw;
    params.get_mut(b).grad = gb;
}
