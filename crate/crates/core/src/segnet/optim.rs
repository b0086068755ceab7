use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::segnet::TrainConfig;

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = 1.0 - iter.min(cfg.max_iter) as f64 / cfg.max_iter as f64;
    cfg.base_lr * frac.powf(cfg.power)
}

/// SGD with heavy-ball momentum: `v <- m * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Updates every trainable parameter and clears its gradient. Fails
    /// before touching anything if a trainable parameter has no gradient.
    pub fn step(&mut self, params: &mut LayerParams, lr: f64) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, e)| e.trainable && e.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        for (name, e) in params.iter_mut() {
            if !e.trainable {
                continue;
            }
            let g = e.grad.take().expect("checked above");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((p, v), g) in e.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
