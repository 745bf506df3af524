//! Linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl Schedule {
    /// Learning rate for optimizer step `step` (0-based); steps past the end
    /// stay at `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 || step >= self.total_steps {
            return if step >= self.total_steps {
                self.min_lr
            } else {
                self.peak
            };
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.min_lr + (self.peak - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }
}

pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}
