use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

/// SGD with heavy-ball momentum: `v = μ·v + g`, `p -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        Sgd {
            cfg,
            velocity: store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Update every parameter accepted by `trainable` from its stored gradient.
    pub fn step_where(&mut self, store: &mut ParamStore, trainable: impl Fn(ParamId) -> bool) {
        let prec = store.precision();
        let ids: Vec<ParamId> = store.ids().filter(|id| trainable(*id)).collect();
        let clip = match self.cfg.max_grad_norm {
            Some(max) => {
                let norm = ids
                    .iter()
                    .map(|id| store.param(*id).grad.data().iter().map(|g| g * g).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for id in ids {
            let p = store.param_mut(id);
            let vel = &mut self.velocity[id.0];
            for ((w, g), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(vel.data_mut())
            {
                let g = g * clip + self.cfg.weight_decay * *w;
                *v = self.cfg.momentum * *v + g;
                *w = prec.round(*w - self.cfg.lr * *v);
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_where(store, |_| true);
    }
}
