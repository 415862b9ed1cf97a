use std::collections::HashMap;

use super::graph::{Gradients, NormUpdate};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Momentum SGD with coupled L2 weight decay:
/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (id, g) in grads.sorted_params() {
            let p = store.param_mut(id);
            if !p.trainable {
                continue;
            }
            let wd = if p.kind.decays() {
                self.weight_decay
            } else {
                0.0
            };
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(p.value.dims()));
            for ((w, vel), &gr) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(g.data())
            {
                *vel = self.momentum * *vel + gr + wd * *w;
                *w -= self.lr * *vel;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StatsPolicy {
    /// Exponential moving average with the given momentum.
    Momentum(f32),
    /// Cumulative mean; `count` is the number of batches already folded in.
    Cumulative { count: usize },
}

pub fn apply_norm_updates(store: &mut ParamStore, updates: &[NormUpdate], policy: StatsPolicy) {
    let blend = |old: &mut [f32], new: &[f32]| {
        for (o, &n) in old.iter_mut().zip(new) {
            *o = match policy {
                StatsPolicy::Momentum(m) => (1.0 - m) * *o + m * n,
                StatsPolicy::Cumulative { count } => *o + (n - *o) / (count as f32 + 1.0),
            };
        }
    };
    for u in updates {
        blend(store.buffer_mut(u.mean_buf).data_mut(), &u.batch_mean);
        blend(store.buffer_mut(u.var_buf).data_mut(), &u.batch_var);
    }
}
