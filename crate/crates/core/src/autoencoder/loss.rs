use candle_core::Tensor;
use serde::{Deserialize, Serialize};

/// Scalar parts of the composite objective. `total` is always computed here
/// as `l_ssim + lambda · l_mmd`, so the identity holds by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "BreakdownParts")]
pub struct LossBreakdown {
    l_ssim: f64,
    l_mmd: f64,
    lambda: f64,
    total: f64,
    mmd_skipped: bool,
}

#[derive(Deserialize)]
struct BreakdownParts {
    l_ssim: f64,
    l_mmd: f64,
    lambda: f64,
    mmd_skipped: bool,
}

impl From<BreakdownParts> for LossBreakdown {
    fn from(p: BreakdownParts) -> Self {
        LossBreakdown::new(p.l_ssim, p.l_mmd, p.lambda, p.mmd_skipped)
    }
}

impl LossBreakdown {
    pub fn new(l_ssim: f64, l_mmd: f64, lambda: f64, mmd_skipped: bool) -> Self {
        LossBreakdown {
            l_ssim,
            l_mmd,
            lambda,
            total: l_ssim + lambda * l_mmd,
            mmd_skipped,
        }
    }

    pub fn l_ssim(&self) -> f64 {
        self.l_ssim
    }

    pub fn l_mmd(&self) -> f64 {
        self.l_mmd
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Set when the batch held a single domain and the MMD term was dropped.
    pub fn mmd_skipped(&self) -> bool {
        self.mmd_skipped
    }
}

/// Differentiable total plus its scalar breakdown.
#[derive(Debug)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub latents: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_set_values() {
        let b = LossBreakdown::new(0.4, 0.02, 5.0, false);
        assert!((b.total() - 0.5).abs() < 1e-15);
        assert_eq!(b.lambda(), 5.0);
    }

    #[test]
    fn deserialization_recomputes_total() {
        let b: LossBreakdown =
            serde_json::from_str(r#"{"l_ssim":0.25,"l_mmd":0.5,"lambda":5.0,"total":99.0,"mmd_skipped":false}"#).unwrap();
        assert_eq!(b.total(), 0.25 + 5.0 * 0.5);
    }
}
