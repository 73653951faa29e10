//! Warmup-then-step learning-rate schedule and batch-shape defaults.

use crate::{Error, Result};

/// Learning-rate plan: linear warmup to the peak, then step decays.
/// Also carries the P (persons) x K (images) batch shape.
#[derive(Debug, Clone)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f32,
    pub lr_peak: f32,
    /// (epoch, lr) pairs with ascending epochs; from each epoch on, that lr
    /// applies until the next decay point.
    pub decay_epochs: Vec<(usize, f32)>,
    pub batch_p: usize,
    pub batch_k: usize,
}

impl ScheduleConfig {
    /// 100 epochs: 0.06 -> 0.6 over 10 epochs, decays at 40 and 80;
    /// batches of 16 persons x 8 images.
    pub fn paper() -> Self {
        Self {
            total_epochs: 100,
            warmup_epochs: 10,
            lr_start: 0.06,
            lr_peak: 0.6,
            decay_epochs: vec![(40, 0.06), (80, 0.006)],
            batch_p: 16,
            batch_k: 8,
        }
    }

    /// Compressed 40-epoch schedule with proportionally scaled warmup and
    /// decay points (4/16/32); batches of 4 persons x 4 images.
    pub fn desk() -> Self {
        Self {
            total_epochs: 40,
            warmup_epochs: 4,
            lr_start: 0.06,
            lr_peak: 0.6,
            decay_epochs: vec![(16, 0.06), (32, 0.006)],
            batch_p: 4,
            batch_k: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start < self.lr_peak) {
            return Err(Error::Config(format!(
                "lr_start {} must be below lr_peak {}",
                self.lr_start, self.lr_peak
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config("warmup longer than the run".into()));
        }
        if self.batch_p == 0 || self.batch_k == 0 {
            return Err(Error::Config("batch shape must be positive".into()));
        }
        let mut prev = None;
        for (e, _) in &self.decay_epochs {
            if let Some(p) = prev {
                if *e <= p {
                    return Err(Error::Config("decay epochs must ascend".into()));
                }
            }
            prev = Some(*e);
        }
        Ok(())
    }
}

/// Piecewise linear-then-constant learning rate at epoch `e`.
pub fn lr_at_epoch(e: usize, s: &ScheduleConfig) -> f32 {
    debug_assert!(e < s.total_epochs, "epoch {e} beyond schedule");
    if e < s.warmup_epochs {
        return s.lr_start + (s.lr_peak - s.lr_start) * e as f32 / s.warmup_epochs as f32;
    }
    let mut lr = s.lr_peak;
    for (epoch, value) in &s.decay_epochs {
        if e >= *epoch {
            lr = *value;
        }
    }
    lr
}
