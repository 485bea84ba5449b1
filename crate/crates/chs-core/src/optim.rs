//! Adam with decoupled weight decay, plus the learning-rate schedules.

use crate::elem::Elem;
use crate::nn::ParamMut;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

/// Learning rate for a 1-based epoch: cosine decay from the initial value
/// toward zero at epoch `T + 1`, or a constant.
pub fn learning_rate(schedule: LrSchedule, base_lr: f64, epoch: u32, t_max: u32) -> f64 {
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::Cosine => {
            let i = f64::from(epoch.saturating_sub(1)).min(f64::from(t_max));
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * i / f64::from(t_max)).cos())
        }
    }
}

/// One parameter's first and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub name: String,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Adam with decoupled weight decay. Moments are kept in f64 so optimizer
/// state survives checkpoint round-trips exactly for both element widths.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    slots: Vec<AdamSlot>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step_count: 0, slots: Vec::new() }
    }

    pub fn slots(&self) -> &[AdamSlot] {
        &self.slots
    }

    pub fn restore(&mut self, step_count: u64, slots: Vec<AdamSlot>) {
        self.step_count = step_count;
        self.slots = slots;
    }

    /// Applies one update to every parameter. Decay is decoupled:
    /// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    pub fn step<F: Elem>(&mut self, params: &mut [ParamMut<'_, F>], lr: f64) {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| AdamSlot {
                    name: p.name.clone(),
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: ArrayD::zeros(p.value.raw_dim()),
                })
                .collect();
        }
        assert_eq!(self.slots.len(), params.len(), "parameter set changed under the optimizer");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (slot, p) in self.slots.iter_mut().zip(params.iter_mut()) {
            debug_assert_eq!(slot.name, p.name);
            ndarray::Zip::from(&mut slot.m)
                .and(&mut slot.v)
                .and(&p.grad)
                .and(&mut p.value)
                .for_each(|m, v, g, w| {
                    let g = g.f64();
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    let wf = w.f64();
                    *w = F::of(wf - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * wf));
                });
        }
    }
}
