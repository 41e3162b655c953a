//! Tiny raster charts written as grayscale images (white background, black marks).

use crate::tensor::Tensor;

const HEIGHT: usize = 120;
const MARGIN: usize = 10;

/// Vertical bars scaled so the tallest value fills the plot height.
pub fn bar_chart(values: &[f64]) -> Tensor {
    let bar = 30;
    let gap = 15;
    let width = 2 * MARGIN + values.len() * bar + values.len().saturating_sub(1) * gap;
    let top = values.iter().copied().fold(0.0, f64::max);
    let mut img = Tensor::full([HEIGHT, width.max(2 * MARGIN + 1)], 1.0);
    let w = img.shape()[1];
    let plot = HEIGHT - 2 * MARGIN;
    for (k, &v) in values.iter().enumerate() {
        let h = if top > 0.0 { ((v.max(0.0) / top) * plot as f64).round() as usize } else { 0 };
        let x0 = MARGIN + k * (bar + gap);
        for y in HEIGHT - MARGIN - h..HEIGHT - MARGIN {
            for x in x0..x0 + bar {
                img.data_mut()[y * w + x] = 0.0;
            }
        }
    }
    // baseline
    for x in MARGIN / 2..w - MARGIN / 2 {
        img.data_mut()[(HEIGHT - MARGIN) * w + x] = 0.0;
    }
    img
}

/// Bin counts of `values` over `[lo, hi]`; values outside land in the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    let n = counts.len();
    for &v in values {
        let k = (((v - lo) / (hi - lo)) * n as f64).floor();
        counts[(k.max(0.0) as usize).min(n - 1)] += 1;
    }
    counts
}
