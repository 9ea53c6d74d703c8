use std::f64::consts::PI;

use crate::model::ParamSet;

use super::config::{LrSchedule, OptimConfig};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: OptimConfig,
    velocity: Vec<ParamSet>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// One update over paired parameter and gradient sets. The pairing
    /// order must stay the same across calls.
    pub fn step(&mut self, params: &mut [&mut ParamSet], grads: &[&ParamSet], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| p.zeros_like()).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vw) in p.values_mut().zip(g.values()).zip(v.values_mut()) {
                let d = gw + self.cfg.weight_decay * *w;
                *vw = self.cfg.momentum * *vw + d;
                *w -= lr * *vw;
            }
        }
    }
}

/// Learning rate at `step` of `total` with linear warmup.
pub fn lr_at(base: f64, schedule: LrSchedule, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    match schedule {
        LrSchedule::Cosine => base * 0.5 * (1.0 + (PI * t).cos()),
        LrSchedule::Step => {
            let frac = step as f64 / total.max(1) as f64;
            let drops = [0.6, 0.75, 0.9].iter().filter(|&&m| frac >= m).count();
            base * 0.2f64.powi(drops as i32)
        }
    }
}
