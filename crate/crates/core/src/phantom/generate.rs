use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Rotated ellipse in pixel coordinates with a peak intensity at its centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    /// Semi-axis along the rotated y direction.
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Normalised radius `r² = (u/a)² + (v/b)²` of pixel centre `(x, y)`.
    pub fn radius_sq(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.radius_sq(x, y) <= 1.0
    }
}

/// Appearance knobs shared by a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomStyle {
    pub background: f64,
    pub texture_amplitude: f64,
    pub noise_floor: f64,
}

impl Default for PhantomStyle {
    fn default() -> Self {
        Self { background: 0.05, texture_amplitude: 0.05, noise_floor: 0.01 }
    }
}

/// Full description of one phantom: the first ellipse is the outer region,
/// the rest are nested inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub ellipses: Vec<Ellipse>,
    pub style: PhantomStyle,
}

impl PhantomParams {
    /// Draws 1–3 nested ellipses that fit inside a `size × size` frame.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, size: usize, style: PhantomStyle) -> Self {
        let s = size as f64;
        let outer = Ellipse {
            cx: s / 2.0 + rng.random_range(-0.08..0.08) * s,
            cy: s / 2.0 + rng.random_range(-0.08..0.08) * s,
            a: rng.random_range(0.22..0.36) * s,
            b: rng.random_range(0.18..0.30) * s,
            theta: rng.random_range(-0.6..0.6),
            intensity: rng.random_range(0.45..0.65),
        };
        let mut ellipses = vec![outer];
        let inner_count = rng.random_range(0..=2);
        let min_axis = outer.a.min(outer.b);
        for _ in 0..inner_count {
            // centre offset r_c (in outer-normalised units) and axes bounded by
            // (1 − r_c)·min_axis keep the inner ellipse inside the outer one
            let rc = rng.random_range(0.0..0.35);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (s_t, c_t) = outer.theta.sin_cos();
            let (u, v) = (rc * outer.a * phi.cos(), rc * outer.b * phi.sin());
            let room = (1.0 - rc) * min_axis;
            ellipses.push(Ellipse {
                cx: outer.cx + c_t * u - s_t * v,
                cy: outer.cy + s_t * u + c_t * v,
                a: rng.random_range(0.25..0.6) * room,
                b: rng.random_range(0.2..0.5) * room,
                theta: rng.random_range(-1.5..1.5),
                intensity: rng.random_range(0.15..0.3),
            });
        }
        Self { ellipses, style }
    }

    fn validate(&self) -> Result<()> {
        if self.ellipses.is_empty() || self.ellipses.len() > 3 {
            return Err(invalid(format!("a phantom has 1–3 ellipses, got {}", self.ellipses.len())));
        }
        for e in &self.ellipses {
            if !(e.a > 0.0 && e.b > 0.0) {
                return Err(invalid(format!("degenerate ellipse with axes ({}, {})", e.a, e.b)));
            }
        }
        let st = &self.style;
        if !(0.0..=1.0).contains(&st.background) || st.texture_amplitude < 0.0 || st.noise_floor < 0.0 {
            return Err(invalid("style values out of range"));
        }
        Ok(())
    }
}

/// A rendered phantom: `[H,W]` image in `[0,1]` and its binary region mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Tensor,
    pub mask: Tensor,
    pub seed: u64,
    pub params: PhantomParams,
}

/// Renders `params` at `size × size`. `seed` drives texture phases and noise.
///
/// The outer ellipse carries a smooth radial falloff, nested ellipses add a
/// smooth bump, band-limited texture (a few low-frequency sinusoids) is applied
/// inside the region only, and Gaussian noise at `noise_floor` everywhere.
pub fn generate_phantom(seed: u64, size: usize, params: &PhantomParams) -> Result<Phantom> {
    if size < 16 {
        return Err(invalid(format!("phantom size must be >= 16, got {size}")));
    }
    params.validate()?;
    let mut r = rng::seeded(seed);
    let style = params.style;
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = r.random_range(1.0..4.0) * std::f64::consts::TAU / size as f64;
            let dir = r.random_range(0.0..std::f64::consts::PI);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            (freq, dir, phase)
        })
        .collect();
    let noise = Tensor::randn([size, size], &mut r);

    let outer = params.ellipses[0];
    let mut image = vec![0.0; size * size];
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * size + x;
            let inside = params.ellipses.iter().any(|e| e.contains(px, py));
            let mut v = style.background;
            if inside {
                mask[i] = 1.0;
                v = outer.intensity * (1.0 - 0.3 * outer.radius_sq(px, py).min(1.0));
                for e in &params.ellipses[1..] {
                    let r2 = e.radius_sq(px, py);
                    if r2 <= 1.0 {
                        v += e.intensity * (1.0 - r2);
                    }
                }
                if style.texture_amplitude > 0.0 {
                    let tex: f64 = waves
                        .iter()
                        .map(|&(f, d, p)| (f * (px * d.cos() + py * d.sin()) + p).sin())
                        .sum::<f64>()
                        / waves.len() as f64;
                    v += style.texture_amplitude * tex;
                }
            }
            v += style.noise_floor * noise.data()[i];
            image[i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Phantom {
        image: Tensor::new([size, size], image)?,
        mask: Tensor::new([size, size], mask)?,
        seed,
        params: params.clone(),
    })
}

/// Seeded phantom with random geometry: the geometry stream and the texture
/// stream both derive from `seed`.
pub fn random_phantom(seed: u64, size: usize, style: PhantomStyle) -> Result<Phantom> {
    let params = PhantomParams::random(&mut rng::derived(seed, 1), size, style);
    generate_phantom(seed, size, &params)
}

/// Box-downsamples a rendered phantom by an integer `factor`. Mask blocks with
/// at least half their pixels inside become 1, so the mask stays binary.
pub fn downsample(p: &Phantom, factor: usize) -> Result<Phantom> {
    let &[h, w] = p.image.shape() else {
        return Err(invalid("phantom image must be [H,W]"));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!("cannot downsample {h}x{w} by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let block_mean = |t: &Tensor, i: usize| {
        let (y, x) = (i / ow, i % ow);
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += t.data()[(y * factor + dy) * w + x * factor + dx];
            }
        }
        acc / area
    };
    let image = Tensor::from_fn([oh, ow], |i| block_mean(&p.image, i).clamp(0.0, 1.0));
    let mask = Tensor::from_fn([oh, ow], |i| if block_mean(&p.mask, i) >= 0.5 { 1.0 } else { 0.0 });
    Ok(Phantom { image, mask, seed: p.seed, params: p.params.clone() })
}
