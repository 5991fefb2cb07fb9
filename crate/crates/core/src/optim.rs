//! Adam with bias correction.

use crate::model::ModelParams;
use crate::Tensor;
use std::collections::{BTreeMap, HashMap};

/// Adam state over named parameters. Moments are keyed by parameter name
/// in a BTreeMap so serialization order is stable.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.98, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn from_state(lr: f64, t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.98, eps: 1e-8, t, m, v }
    }

    pub fn state(&self) -> (u64, &BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (self.t, &self.m, &self.v)
    }

    /// One update over every parameter that has a gradient entry.
    /// Parameters without gradients this step (e.g. detached heads) are
    /// left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &HashMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m_map, v_map) = (&mut self.m, &mut self.v);

        params.visit_mut(&mut |name, tensor| {
            let Some(grad) = grads.get(&name) else { return };
            debug_assert_eq!(grad.shape(), tensor.shape(), "{name}");
            let m = m_map.entry(name.clone()).or_insert_with(|| Tensor::zeros(tensor.rows(), tensor.cols()));
            let v = v_map.entry(name).or_insert_with(|| Tensor::zeros(tensor.rows(), tensor.cols()));
            for i in 0..tensor.len() {
                let g = grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                tensor.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}
