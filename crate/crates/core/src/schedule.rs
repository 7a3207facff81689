//! Learning-rate schedules: linear warmup into inverse-square-root decay
//! (pre-training) or linear decay to zero (fine-tuning). Both are continuous
//! at the warmup boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    WarmupInvSqrt,
    LinearToZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Step at which a linear schedule reaches zero; ignored for inv-sqrt.
    pub total_steps: usize,
}

impl Schedule {
    pub fn warmup_inv_sqrt(warmup_steps: usize, peak_lr: f64) -> Schedule {
        Schedule { kind: ScheduleKind::WarmupInvSqrt, warmup_steps, peak_lr, total_steps: 0 }
    }

    pub fn linear_to_zero(warmup_steps: usize, peak_lr: f64, total_steps: usize) -> Schedule {
        Schedule { kind: ScheduleKind::LinearToZero, warmup_steps, peak_lr, total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, d: String| Error::InvalidConfig { field: f.into(), detail: d };
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(field("schedule.peak_lr", format!("{} must be positive", self.peak_lr)));
        }
        if self.warmup_steps == 0 {
            return Err(field("schedule.warmup_steps", "must be at least 1".into()));
        }
        if self.kind == ScheduleKind::LinearToZero && self.total_steps <= self.warmup_steps {
            return Err(field(
                "schedule.total_steps",
                format!("{} must exceed warmup {}", self.total_steps, self.warmup_steps),
            ));
        }
        Ok(())
    }

    /// Learning rate at a (0-based-warmup-inclusive) step count. The ramp
    /// hits `peak_lr` exactly at `warmup_steps`; the linear kind then decays
    /// along the line through (warmup, peak) and (total, 0), clamped at 0.
    pub fn lr_at_step(&self, step: usize) -> f64 {
        let w = self.warmup_steps as f64;
        let s = step as f64;
        if step <= self.warmup_steps {
            return self.peak_lr * s / w;
        }
        match self.kind {
            ScheduleKind::WarmupInvSqrt => self.peak_lr * (w / s).sqrt(),
            ScheduleKind::LinearToZero => {
                if step >= self.total_steps {
                    0.0
                } else {
                    let t = self.total_steps as f64;
                    self.peak_lr * (t - s) / (t - w)
                }
            }
        }
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
