//! Learning-rate schedule: linear warm-up, then cosine decay to zero.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl WarmupCosine {
    /// Warm-up covers `ceil(warmup_frac · total_steps)` steps.
    pub fn new(base_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let warmup = (warmup_frac * total_steps as f64).ceil() as usize;
        WarmupCosine {
            base_lr,
            total_steps,
            warmup_steps: warmup.min(total_steps),
        }
    }

    /// Rate for zero-based step `step`. Reaches `base_lr` on the last warm-up
    /// step and zero on the final step.
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.base_lr * (step + 1) as f64 / w as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(w);
        if decay_steps == 0 {
            return self.base_lr;
        }
        let progress = ((step - w + 1) as f64 / decay_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay_to_zero() {
        let s = WarmupCosine::new(5e-4, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!(s.lr(0) < s.lr(9));
        assert!((s.lr(9) - 5e-4).abs() < 1e-15);
        assert!(s.lr(99) < 1e-6);
        for step in 10..99 {
            assert!(s.lr(step + 1) <= s.lr(step));
        }
    }

    #[test]
    fn warmup_is_rounded_up() {
        assert_eq!(WarmupCosine::new(1.0, 15, 0.1).warmup_steps, 2);
        assert_eq!(WarmupCosine::new(1.0, 1, 0.1).warmup_steps, 1);
    }
}
