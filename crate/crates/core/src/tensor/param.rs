use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// A learnable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            adam_m: z.clone(),
            adam_v: z,
            value,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered name → parameter map. Declaration order is preserved and is the
/// order used by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.insert_full(name, Param::new(value)).0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Param::zero_grad);
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter.
/// `step` is 1-based. Frozen parameters keep their value and moments.
pub fn adam_step(params: &mut ParamStore, lr: f32, cfg: AdamConfig, step: u64) {
    assert!(step >= 1, "adam step index is 1-based");
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let lr_t = (lr as f64 * bc2.sqrt() / bc1) as f32;
    let eps_t = (cfg.eps as f64 * bc2.sqrt()) as f32;
    for (_, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Param {
            value, grad, adam_m, adam_v, ..
        } = p;
        for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(adam_m.data_mut()).zip(adam_v.data_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr_t * *m / (v.sqrt() + eps_t);
        }
    }
}

/// Exponential per-epoch decay: `initial · decay^epoch`.
pub fn lr_schedule(epoch: usize, initial: f32, decay: f32) -> f32 {
    (initial as f64 * (decay as f64).powi(epoch as i32)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w".into(), Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = scalar_store(0.5);
        adam_step(&mut s, 0.001, AdamConfig::default(), 1);
        assert_eq!(s.get(0).value.data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.get_mut(0).grad.data_mut()[0] = 1.0;
        adam_step(&mut s, 0.001, AdamConfig::default(), 1);
        let delta = 1.0 - s.get(0).value.data()[0];
        assert!((delta - 0.001).abs() < 1e-6, "{delta}");
    }

    #[test]
    fn frozen_param_is_untouched() {
        let mut s = scalar_store(1.0);
        s.get_mut(0).grad.data_mut()[0] = 3.0;
        s.get_mut(0).trainable = false;
        adam_step(&mut s, 0.1, AdamConfig::default(), 1);
        assert_eq!(s.get(0).value.data(), &[1.0]);
        assert_eq!(s.get(0).adam_m.data(), &[0.0]);
    }

    #[test]
    fn ten_steps_on_quadratic_match_scripted_trace() {
        // Textbook Adam written out in f64 on f(w) = (w - 3)^2.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            trace.push(w);
        }

        let mut s = scalar_store(0.0);
        for (t, want) in trace.iter().enumerate() {
            let w = s.get(0).value.data()[0];
            s.get_mut(0).grad.data_mut()[0] = 2.0 * (w - 3.0);
            adam_step(&mut s, lr as f32, AdamConfig::default(), t as u64 + 1);
            let got = s.get(0).value.data()[0] as f64;
            assert!((got - want).abs() < 1e-5, "step {t}: {got} vs {want}");
        }
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 0.001, 0.99), 0.001);
        assert!((lr_schedule(1, 0.001, 0.99) - 0.00099).abs() < 1e-9);
        assert!((lr_schedule(10, 0.001, 0.99) - 0.000_904_382).abs() < 1e-8);
    }
}
