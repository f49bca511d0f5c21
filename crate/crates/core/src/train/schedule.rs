use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the epsilon ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ramp {
    /// Cubic ease-in-out `3p^2 - 2p^3`.
    Smooth,
    Linear,
}

/// Epoch counts are absolute: epsilon is 0 for `[0, warmup_epochs)`, ramps
/// over `[warmup_epochs, annealing_epochs)` and stays at `eps_target`
/// afterwards. The learning rate is multiplied by `decay_factor` at the start
/// of every epoch listed in `decay_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub total_epochs: usize,
    pub annealing_epochs: usize,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub lr0: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub eps_target: f64,
    pub ramp: Ramp,
}

impl Schedule {
    /// MNIST settings: batch 256, 70 epochs, annealing until epoch 20,
    /// decays at 50 and 60 by 0.2, lr 5e-4, clip 10.
    pub fn mnist(eps_target: f64) -> Self {
        Self {
            total_epochs: 70,
            annealing_epochs: 20,
            warmup_epochs: 1,
            decay_epochs: vec![50, 60],
            decay_factor: 0.2,
            lr0: 5e-4,
            grad_clip: 10.0,
            batch_size: 256,
            eps_target,
            ramp: Ramp::Smooth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("total_epochs and batch_size must be >= 1".into());
        }
        if self.warmup_epochs > self.annealing_epochs {
            return bad("warmup_epochs must not exceed annealing_epochs".into());
        }
        if self.annealing_epochs > self.total_epochs {
            return bad("annealing_epochs must not exceed total_epochs".into());
        }
        let mut prev = self.annealing_epochs;
        for &e in &self.decay_epochs {
            if e < prev || e > self.total_epochs {
                return bad(format!(
                    "decay epochs must be increasing, >= annealing_epochs and <= total_epochs: {:?}",
                    self.decay_epochs
                ));
            }
            prev = e + 1;
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if !(self.lr0 > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr0 and grad_clip must be > 0".into());
        }
        if !(self.eps_target >= 0.0) || !self.eps_target.is_finite() {
            return bad(format!("eps_target must be >= 0, got {}", self.eps_target));
        }
        Ok(())
    }
}

/// Epsilon at global `step` given `steps_per_epoch`.
pub fn epsilon_schedule(step: usize, steps_per_epoch: usize, schedule: &Schedule) -> f64 {
    let start = schedule.warmup_epochs * steps_per_epoch;
    let end = schedule.annealing_epochs * steps_per_epoch;
    if step < start {
        return 0.0;
    }
    if step >= end {
        return schedule.eps_target;
    }
    let p = (step - start) as f64 / (end - start) as f64;
    let shape = match schedule.ramp {
        Ramp::Linear => p,
        Ramp::Smooth => p * p * (3.0 - 2.0 * p),
    };
    schedule.eps_target * shape
}

/// Learning rate during `epoch` (0-based).
pub fn learning_rate(epoch: usize, schedule: &Schedule) -> f64 {
    let decays = schedule.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    schedule.lr0 * schedule.decay_factor.powi(decays as i32)
}
