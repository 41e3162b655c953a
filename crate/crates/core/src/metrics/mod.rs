//! Image quality (MSE, PSNR, SSIM, LPIPS-style), explanation faithfulness,
//! Dice overlap, and Fréchet feature distance.

mod dice;
mod faithfulness;
mod frechet;
mod image;
mod lpips;

pub use dice::dice;
pub use faithfulness::{faithfulness, pearson, spatial_corr};
pub use frechet::frechet_distance;
pub use image::{mse, psnr, ssim};
pub use lpips::{lpips, PerceptualNet, PERCEPTUAL_SEED};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Peak intensity `L`.
    pub peak: f64,
    pub k1: f64,
    pub k2: f64,
    pub ssim_window: usize,
    pub lpips_weights: [f64; 3],
    /// PSNR reported when the MSE is exactly zero.
    pub psnr_cap: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { peak: 1.0, k1: 0.01, k2: 0.03, ssim_window: 7, lpips_weights: [1.0 / 3.0; 3], psnr_cap: 100.0 }
    }
}

impl MetricConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || !(self.c1() > 0.0) || !(self.c2() > 0.0) {
            return Err(invalid("metric config needs L > 0 and positive SSIM constants"));
        }
        if self.lpips_weights.iter().any(|w| *w < 0.0) {
            return Err(invalid("LPIPS weights must be non-negative"));
        }
        if self.ssim_window == 0 {
            return Err(invalid("SSIM window must be >= 1"));
        }
        Ok(())
    }
}
