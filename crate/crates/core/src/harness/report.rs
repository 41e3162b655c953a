use serde::{Deserialize, Serialize};

use crate::prototypes::HeadKind;

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `x` rounded to `digits` significant digits, in plain decimal notation.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Self { mean, sd }
    }
}

/// Dataset-level result of `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub images: usize,
    pub psnr: Summary,
    pub ssim: Summary,
    pub lpips: Summary,
    pub dice: Summary,
    pub dice_definition: String,
    pub frechet_distance: f64,
    pub frechet_definition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub head: HeadKind,
    pub m: usize,
    pub images: usize,
    pub faithfulness: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfluence {
    pub head: HeadKind,
    pub image_id: String,
    pub faithfulness: f64,
    /// NIS in prototype order.
    pub nis: Vec<f64>,
}

/// Three-way head comparison plus the image-quality summary of the same samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub heads: Vec<HeadSummary>,
    /// Heads ordered by mean faithfulness, highest first.
    pub ranking: Vec<HeadKind>,
    pub per_image: Vec<ImageInfluence>,
    pub quality: Evaluation,
}
