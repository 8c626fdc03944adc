use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Adam with bias correction. After each update parameters are rounded to
/// `f32` so that a float32 checkpoint stores them exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let slots = params
            .iter()
            .map(|(_, p)| AdamSlot {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                step: 0,
            })
            .collect();
        Self { config, slots }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply one update. Parameters whose gradient is `None` are untouched,
    /// including their moment estimates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Option<Tensor>)]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (id, g) in grads {
            let Some(g) = g else { continue };
            let slot = &mut self.slots[id.0];
            let p = params.get_mut(*id);
            assert_eq!(g.shape(), p.value.shape(), "gradient shape for {}", p.name);
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            let value = std::sync::Arc::make_mut(&mut p.value);
            for (((w, &gi), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w = ((*w - update) as f32) as f64;
            }
        }
    }
}
