//! Adam with decoupled weight decay.
//!
//! The step counter is global, incremented before bias correction, and decay
//! is applied directly to the parameter as `lr * weight_decay * value`,
//! outside the moment estimates.

use crate::tensor::Param;
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

struct Slot {
    param: Param,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Adam {
    /// Registers every parameter exactly once; duplicate handles panic.
    pub fn new(params: Vec<Param>, cfg: AdamConfig) -> Self {
        let mut seen = HashSet::new();
        for p in &params {
            assert!(seen.insert(p.ptr_id()), "parameter {} registered twice", p.name());
        }
        let slots = params
            .into_iter()
            .map(|param| {
                let n = param.numel();
                Slot { param, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        Adam { cfg, step_count: 0, slots }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients currently accumulated on the parameters.
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for slot in &mut self.slots {
            let grad = slot.param.grad_snapshot();
            let mut data = slot.param.data_snapshot();
            for j in 0..data.len() {
                let g = grad[j];
                slot.m[j] = self.cfg.beta1 * slot.m[j] + (1.0 - self.cfg.beta1) * g;
                slot.v[j] = self.cfg.beta2 * slot.v[j] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = slot.m[j] / bc1;
                let vhat = slot.v[j] / bc2;
                data[j] -=
                    self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.lr * self.cfg.weight_decay * data[j];
            }
            slot.param.set_data(&data);
        }
    }

    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }

    /// Moment buffers in registration order, for checkpointing.
    pub fn state(&self) -> (u64, Vec<(&str, &[f64], &[f64])>) {
        let per = self.slots.iter().map(|s| (s.param.name(), s.m.as_slice(), s.v.as_slice())).collect();
        (self.step_count, per)
    }

    /// Restores moments and step counter; names and lengths must line up with
    /// the registered parameters.
    pub fn restore(&mut self, step_count: u64, moments: &[(String, Vec<f64>, Vec<f64>)]) {
        assert_eq!(moments.len(), self.slots.len(), "optimizer state slot count mismatch");
        for (slot, (name, m, v)) in self.slots.iter_mut().zip(moments) {
            assert_eq!(slot.param.name(), name, "optimizer state name mismatch");
            assert_eq!(slot.m.len(), m.len(), "optimizer moment length mismatch for {name}");
            slot.m.copy_from_slice(m);
            slot.v.copy_from_slice(v);
        }
        self.step_count = step_count;
    }
}
