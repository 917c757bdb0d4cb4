//! AdamW with a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Learning rate for the zero-based `step`: linear warmup to the peak,
    /// then cosine decay to zero at `total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.95, 0.01)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient entry or marked frozen are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[(ParamId, Tensor<f32>)], lr: f64) {
        self.step += 1;
        if self.moments.len() < ps.len() {
            self.moments.resize(ps.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (id, grad) in grads {
            let param = ps.get_mut(*id);
            if !param.trainable {
                continue;
            }
            let lr_p = lr * param.lr_scale as f64;
            let decay = if param.decay { self.weight_decay } else { 0.0 };
            let n = param.value.numel();
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), m), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                let update = m_hat / (v_hat.sqrt() + self.eps) + decay * *p as f64;
                *p = (*p as f64 - lr_p * update) as f32;
            }
        }
    }
}
