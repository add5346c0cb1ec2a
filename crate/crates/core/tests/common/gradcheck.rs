//! Central-difference gradient checks for every layer kind.
//!
//! Each case is a one-layer tape. The scalar under test is a fixed random
//! projection `L = Σ r·y` evaluated in 64-bit, so `dL/dy = r` seeds the
//! analytic backward pass. Every parameter and input coordinate is probed.

use qutelab::tensor::ops::{self, Padding};
use qutelab::tensor::{NodeId, ParamId, ParamStore, Rng, Tape, Tensor};

pub const EPS: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
/// Denominator floor: coordinates whose true gradient is below this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerCase {
    Conv2dSame,
    Conv2dValidStride2,
    Pointwise,
    DepthwiseSame,
    DepthwiseStride2,
    Dense,
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Dropout,
    SoftmaxCrossEntropy,
}

impl LayerCase {
    pub const ALL: [LayerCase; 11] = [
        LayerCase::Conv2dSame,
        LayerCase::Conv2dValidStride2,
        LayerCase::Pointwise,
        LayerCase::DepthwiseSame,
        LayerCase::DepthwiseStride2,
        LayerCase::Dense,
        LayerCase::Relu,
        LayerCase::MaxPool2,
        LayerCase::GlobalAvgPool,
        LayerCase::Dropout,
        LayerCase::SoftmaxCrossEntropy,
    ];
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradStats {
    pub coords: usize,
    pub within: usize,
    pub worst: f64,
    pub worst_abs: f64,
}

impl GradStats {
    pub fn add(&mut self, other: GradStats) {
        self.coords += other.coords;
        self.within += other.within;
        self.worst = self.worst.max(other.worst);
        self.worst_abs = self.worst_abs.max(other.worst_abs);
    }

    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.coords.max(1) as f64
    }

    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.coords += 1;
        if rel <= REL_TOL {
            self.within += 1;
        }
        self.worst = self.worst.max(rel);
        self.worst_abs = self.worst_abs.max((analytic - numeric).abs());
    }
}

struct Case {
    params: ParamStore,
    ids: Vec<ParamId>,
    input: Tensor,
    dropout_seed: u64,
    kind: LayerCase,
}

impl Case {
    fn new(kind: LayerCase, seed: u64) -> Self {
        let mut rng = Rng::new(seed, 0x9c);
        let mut params = ParamStore::new();
        let mut add = |name: &str, shape: &[usize], rng: &mut Rng| params_insert(&mut params, name, shape, rng);
        let (input_shape, ids): (Vec<usize>, Vec<ParamId>) = match kind {
            LayerCase::Conv2dSame => (vec![2, 2, 5, 5], vec![add("w", &[3, 2, 3, 3], &mut rng), add("b", &[3], &mut rng)]),
            LayerCase::Conv2dValidStride2 => (vec![2, 2, 7, 6], vec![add("w", &[2, 2, 3, 3], &mut rng), add("b", &[2], &mut rng)]),
            LayerCase::Pointwise => (vec![2, 3, 4, 4], vec![add("w", &[4, 3, 1, 1], &mut rng), add("b", &[4], &mut rng)]),
            LayerCase::DepthwiseSame => (vec![2, 3, 5, 5], vec![add("w", &[3, 1, 3, 3], &mut rng), add("b", &[3], &mut rng)]),
            LayerCase::DepthwiseStride2 => (vec![2, 2, 6, 7], vec![add("w", &[2, 1, 3, 3], &mut rng), add("b", &[2], &mut rng)]),
            LayerCase::Dense => (vec![3, 2, 2, 3], vec![add("w", &[12, 5], &mut rng), add("b", &[5], &mut rng)]),
            LayerCase::Relu | LayerCase::MaxPool2 | LayerCase::GlobalAvgPool | LayerCase::Dropout => (vec![2, 3, 4, 6], vec![]),
            LayerCase::SoftmaxCrossEntropy => (vec![4, 6], vec![]),
        };
        let input = Tensor::random_uniform(&input_shape, -1.0, 1.0, &mut rng);
        Self {
            params,
            ids,
            input,
            dropout_seed: seed,
            kind,
        }
    }

    fn labels(&self) -> Vec<usize> {
        (0..self.input.batch()).map(|i| (i * 5 + 1) % self.input.row_len()).collect()
    }

    /// Tape plus output node for the current parameters and input.
    fn forward(&self, input: &Tensor) -> (Tape, NodeId) {
        let mut tape = Tape::new();
        tape.track_leaf_grads();
        let x = tape.leaf(input.clone()).unwrap();
        let p = &self.params;
        let id = |i: usize| self.ids[i];
        let y = match self.kind {
            LayerCase::Conv2dSame | LayerCase::Pointwise => tape.conv2d(x, p, id(0), id(1), 1, Padding::Same),
            LayerCase::Conv2dValidStride2 => tape.conv2d(x, p, id(0), id(1), 2, Padding::Valid),
            LayerCase::DepthwiseSame => tape.depthwise(x, p, id(0), id(1), 1, Padding::Same),
            LayerCase::DepthwiseStride2 => tape.depthwise(x, p, id(0), id(1), 2, Padding::Same),
            LayerCase::Dense => tape.dense(x, p, id(0), id(1)),
            LayerCase::Relu => tape.relu(x),
            LayerCase::MaxPool2 => tape.max_pool2(x),
            LayerCase::GlobalAvgPool => tape.global_avg_pool(x),
            LayerCase::Dropout => tape.dropout(x, 0.3, true, &mut Rng::new(self.dropout_seed, 0xd0)),
            LayerCase::SoftmaxCrossEntropy => Ok(x),
        }
        .unwrap();
        (tape, y)
    }

    fn loss(&self, input: &Tensor, r: &Tensor) -> f64 {
        let (tape, y) = self.forward(input);
        if self.kind == LayerCase::SoftmaxCrossEntropy {
            return ops::softmax_cross_entropy(tape.value(y), &self.labels(), 1.0).unwrap().0;
        }
        tape.value(y).data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

fn params_insert(params: &mut ParamStore, name: &str, shape: &[usize], rng: &mut Rng) -> ParamId {
    params.insert(name.into(), Tensor::random_uniform(shape, -1.0, 1.0, rng))
}

/// Compare analytic and numerical gradients for one layer and seed.
pub fn check_layer(kind: LayerCase, seed: u64) -> GradStats {
    let mut case = Case::new(kind, seed);
    let (tape, y) = case.forward(&case.input);
    let out_shape = tape.value(y).shape().to_vec();
    let r = Tensor::random_uniform(&out_shape, -1.0, 1.0, &mut Rng::new(seed, 0x7));
    let seed_grad = if kind == LayerCase::SoftmaxCrossEntropy {
        ops::softmax_cross_entropy(tape.value(y), &case.labels(), 1.0).unwrap().1
    } else {
        r.clone()
    };
    case.params.zero_grads();
    let leaves = tape.backward(vec![(y, seed_grad)], &mut case.params).unwrap();
    let input_grad = leaves.into_iter().map(|(_, g)| g).next().expect("input gradient");

    // Each probe takes a symmetric step; the step actually realised in
    // 32-bit arithmetic is the divisor.
    let mut stats = GradStats::default();
    let mut x = case.input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + EPS;
        let f_hi = case.loss(&x, &r);
        let hi = x.data()[i];
        x.data_mut()[i] = orig - EPS;
        let f_lo = case.loss(&x, &r);
        let lo = x.data()[i];
        x.data_mut()[i] = orig;
        stats.record(input_grad.data()[i] as f64, (f_hi - f_lo) / (hi as f64 - lo as f64));
    }
    for &pid in &case.ids.clone() {
        let analytic = case.params.get(pid).grad.clone();
        for i in 0..analytic.len() {
            let orig = case.params.get(pid).value.data()[i];
            case.params.get_mut(pid).value.data_mut()[i] = orig + EPS;
            let hi = case.params.get(pid).value.data()[i];
            let f_hi = case.loss(&case.input, &r);
            case.params.get_mut(pid).value.data_mut()[i] = orig - EPS;
            let lo = case.params.get(pid).value.data()[i];
            let f_lo = case.loss(&case.input, &r);
            case.params.get_mut(pid).value.data_mut()[i] = orig;
            stats.record(analytic.data()[i] as f64, (f_hi - f_lo) / (hi as f64 - lo as f64));
        }
    }
    stats
}
