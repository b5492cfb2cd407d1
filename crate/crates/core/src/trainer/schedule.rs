use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer and schedule settings. The schedules are defined on steps
/// `0..=total_steps()`; training performs one update at each step before
/// the last, so step `total_steps()` holds the end-of-training values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 100,
            warmup_epochs: 1,
            base_lr: 1e-4,
            peak_lr: 1e-3,
            final_lr: 1e-6,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.996,
            ema_end: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Lr,
    Wd,
    Ema,
}

/// `(1 − t)·a + t·b`; exact at both ends.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (1.0 - t) * a + t * b
}

impl ScheduleConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("schedules: {m}")));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be >= 1");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        let lrs = [self.base_lr, self.peak_lr, self.final_lr];
        if lrs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("learning rates must be finite and >= 0");
        }
        if [self.wd_start, self.wd_end].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("weight decay must be finite and >= 0");
        }
        if !(0.0 <= self.ema_start && self.ema_start <= self.ema_end && self.ema_end <= 1.0) {
            return bad("need 0 <= ema_start <= ema_end <= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        Ok(())
    }

    /// Value of one schedule at `step`.
    ///
    /// The learning rate rises linearly from `base_lr` to `peak_lr` over the
    /// warmup, then follows a half cosine down to `final_lr`; weight decay
    /// and EMA momentum are linear over the whole run.
    pub fn value(&self, kind: ScheduleKind, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(Error::StepOutOfRange { step, total });
        }
        let frac = step as f64 / total as f64;
        Ok(match kind {
            ScheduleKind::Wd => lerp(self.wd_start, self.wd_end, frac),
            ScheduleKind::Ema => lerp(self.ema_start, self.ema_end, frac),
            ScheduleKind::Lr => {
                let warm = self.warmup_steps();
                if step < warm {
                    lerp(self.base_lr, self.peak_lr, step as f64 / warm as f64)
                } else if warm == total {
                    self.peak_lr
                } else {
                    let p = (step - warm) as f64 / (total - warm) as f64;
                    let t = 0.5 * (1.0 - (std::f64::consts::PI * p).cos());
                    lerp(self.peak_lr, self.final_lr, t)
                }
            }
        })
    }
}

/// Free-function form of [`ScheduleConfig::value`].
pub fn schedule_value(kind: ScheduleKind, step: usize, config: &ScheduleConfig) -> Result<f64> {
    config.value(kind, step)
}
