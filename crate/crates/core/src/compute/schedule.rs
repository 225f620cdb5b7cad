use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineDecay,
    LinearWarmupThenCosine,
}

/// Learning rate as a function of the global step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::CosineDecay,
            base_lr,
            total_epochs,
            warmup_steps: 0,
        }
    }

    pub fn warmup_cosine(base_lr: f64, total_epochs: usize, warmup_steps: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::LinearWarmupThenCosine,
            base_lr,
            total_epochs,
            warmup_steps,
        }
    }

    /// Cosine decay from `base_lr` to zero over `total_epochs · steps_per_epoch`
    /// steps; the warmup variant first ramps linearly from zero over
    /// `warmup_steps` and then decays over the remaining steps.
    pub fn lr_at(&self, global_step: usize, steps_per_epoch: usize) -> f64 {
        let total = (self.total_epochs * steps_per_epoch) as f64;
        let t = global_step as f64;
        let cosine = |t: f64, span: f64| -> f64 {
            if span <= 0.0 {
                return 0.0;
            }
            let frac = (t / span).clamp(0.0, 1.0);
            self.base_lr * 0.5 * (1.0 + (PI * frac).cos())
        };
        match self.kind {
            ScheduleKind::CosineDecay => cosine(t, total),
            ScheduleKind::LinearWarmupThenCosine => {
                let w = self.warmup_steps as f64;
                if t < w {
                    self.base_lr * t / w
                } else {
                    cosine(t - w, total - w)
                }
            }
        }
    }
}
