use serde::{Deserialize, Serialize};

use super::layers::Param;

/// Adam with bias-corrected moments. Moment buffers live on each [`Param`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub steps: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params {
            p.ensure_state();
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Piecewise-constant learning rate: multiply by `gamma` at each milestone
/// expressed as a fraction of total epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDownSchedule {
    pub base_lr: f32,
    pub milestones: Vec<f32>,
    pub gamma: f32,
}

impl StepDownSchedule {
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f32 {
        let drops = self
            .milestones
            .iter()
            .filter(|&&f| epoch as f32 >= (f * total_epochs as f32).floor())
            .count();
        self.base_lr * self.gamma.powi(drops as i32)
    }
}

impl Default for StepDownSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, milestones: vec![0.5, 0.75], gamma: 0.1 }
    }
}
