//! Stochastic gradient descent with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// Heavy-ball SGD with the update rule
/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
///
/// Only parameters that are trainable *and* received a gradient move.
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: Vec::new() }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let SgdConfig { learning_rate: lr, momentum: mu, weight_decay: wd } = self.cfg;
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.value_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}
