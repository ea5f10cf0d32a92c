use serde::{Deserialize, Serialize};

use super::{KernelError, ParamStore};

/// AdamW hyper-parameters plus the warmup/cosine schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: 0.03,
            total_steps: 1000,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<(), KernelError> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.total_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(KernelError::BadHyper(format!("{self:?}")))
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).round() as u64
    }
}

/// Linear warmup from 0 to the base rate, then half-cosine decay to 0 at
/// `total_steps`.
pub fn cosine_warmup_lr(step: u64, hyper: &OptimHyper) -> Result<f64, KernelError> {
    if step > hyper.total_steps {
        return Err(KernelError::StepOutOfRange { step, total: hyper.total_steps });
    }
    let warm = hyper.warmup_steps();
    if step < warm {
        return Ok(hyper.lr * step as f64 / warm as f64);
    }
    let span = hyper.total_steps - warm;
    if span == 0 {
        return Ok(0.0);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(hyper.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One bias-corrected AdamW update with decoupled weight decay, applied to
/// every trainable parameter using its accumulated gradient. Frozen
/// parameters are left untouched, optimizer state included.
pub fn adamw_step(store: &mut ParamStore, hyper: &OptimHyper, lr: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let e = store.entry_mut(id);
        if !e.trainable {
            continue;
        }
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let grad = e.grad.data();
        let m = e.first_moment.data_mut();
        for (mi, &g) in m.iter_mut().zip(grad) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * g;
        }
        let v = e.second_moment.data_mut();
        for (vi, &g) in v.iter_mut().zip(grad) {
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * g * g;
        }
        let m = e.first_moment.data();
        let v = e.second_moment.data();
        let w = e.value.data_mut();
        for i in 0..w.len() {
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * w[i]);
        }
    }
}
