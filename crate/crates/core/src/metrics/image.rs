use super::MetricConfig;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.is_empty() {
        return Err(invalid("empty image"));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10·log10(L²/MSE)`, or `psnr_cap` when the images are identical.
pub fn psnr(x: &Tensor, y: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(cfg.psnr_cap);
    }
    Ok(10.0 * (cfg.peak * cfg.peak / m).log10())
}

/// Mean SSIM over all `window × window` windows (stride 1, uniform weights,
/// population statistics).
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    same_shape(x, y)?;
    let &[h, w] = x.shape() else {
        return Err(shape_err(format!("SSIM needs [H,W] images, got {:?}", x.shape())));
    };
    let k = cfg.ssim_window;
    if h < k || w < k {
        return Err(invalid(format!("image {h}x{w} is smaller than the {k}x{k} SSIM window")));
    }
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let (xd, yd) = (x.data(), y.data());
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut sx, mut sy) = (0.0, 0.0);
            for a in i..i + k {
                for b in j..j + k {
                    sx += xd[a * w + b];
                    sy += yd[a * w + b];
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in i..i + k {
                for b in j..j + k {
                    let dx = xd[a * w + b] - mx;
                    let dy = yd[a * w + b] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
