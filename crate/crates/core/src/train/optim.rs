//! Adam with decoupled-from-nothing classic L2 weight decay, and the
//! warm-up multi-step learning-rate schedule.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-4,
        }
    }
}

/// Per-parameter first and second moment state.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: AdamConfig) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let v = params
            .entries()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self { cfg, m, v, t: 0 }
    }

    /// One update. `grads` maps parameter names to gradient tensors; missing
    /// names are treated as zero gradient (weight decay still applies).
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (slot, (name, tensor)) in params.entries_mut().iter_mut().enumerate() {
            let grad = grads.get(name.as_str());
            let data = tensor.data_mut();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..data.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]) + self.cfg.weight_decay * data[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Linear warm-up over the first fraction of steps, then step decays at
/// fixed fractions of the run.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    base_lr: f64,
    warmup_steps: usize,
    milestones: Vec<usize>,
    gamma: f64,
}

impl LrSchedule {
    pub fn new(
        base_lr: f64,
        total_steps: usize,
        warmup_frac: f64,
        milestone_fracs: &[f64],
        gamma: f64,
    ) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_frac).round() as usize).max(1);
        let milestones = milestone_fracs
            .iter()
            .map(|f| (total_steps as f64 * f).floor() as usize)
            .collect();
        Self {
            base_lr,
            warmup_steps,
            milestones,
            gamma,
        }
    }

    /// Learning rate for a 0-based global step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decays = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * warm * self.gamma.powi(decays as i32)
    }
}
