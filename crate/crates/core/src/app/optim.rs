//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::app::config::OptimConfig;
use crate::nn::{Grads, ParamId, ParamStore, Tensor};

/// Learning rate at `step` (0-based) of `total` steps.
pub fn lr_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Only weight matrices decay; biases, norms and embeddings do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    /// First and second moments per parameter, created on first update.
    #[serde(skip)]
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self { step: 0, moments: vec![None; num_params] }
    }

    /// Scales `grads` so their global norm is at most `max_norm`; returns
    /// the norm before clipping.
    pub fn clip(grads: &mut Grads, max_norm: f64) -> f64 {
        let norm = grads.global_norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
        norm
    }

    /// One update of every parameter that received a gradient and is not
    /// frozen. Untouched parameters keep their values and moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, cfg: &OptimConfig, lr: f64, frozen: &[bool]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<ParamId> = grads.touched().collect();
        for id in ids {
            if frozen[id.index()] {
                continue;
            }
            let g = grads.get(id).expect("touched parameter has a gradient");
            let decay = if decays(store.name(id)) { cfg.weight_decay } else { 0.0 };
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *p -= lr * (update + decay * *p);
            }
        }
    }
}
