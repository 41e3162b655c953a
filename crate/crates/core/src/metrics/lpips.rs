use super::MetricConfig;
use crate::error::{shape_err, Result};
use crate::exec::Execution;
use crate::nn::Conv;
use crate::rng;
use crate::tensor::{Graph, ParamSet, Tensor};

pub const PERCEPTUAL_SEED: u64 = 0x5eed_1e1f;

/// Frozen, randomly initialised conv stack standing in for a pretrained
/// recognition network. The three taps sit at full, half and quarter resolution.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    params: ParamSet,
    layers: [Conv; 3],
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut params = ParamSet::new();
        let layers = [
            Conv::new(&mut params, "tap1", 1, 8, 3, 1, 1.0, &mut r),
            Conv::new(&mut params, "tap2", 8, 16, 3, 2, 1.0, &mut r),
            Conv::new(&mut params, "tap3", 16, 32, 3, 2, 1.0, &mut r),
        ];
        params.set_requires_grad(false);
        Self { params, layers }
    }

    /// Channel-unit-normalised activations of each tap for an `[H,W]` image in `[0,1]`.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let &[h, w] = image.shape() else {
            return Err(shape_err(format!("perceptual net takes [H,W] images, got {:?}", image.shape())));
        };
        let g = Graph::with_execution(Execution::Sequential);
        let vars = self.params.bind_frozen(&g);
        // centre inputs to [-1, 1]
        let mut x = g.constant(image.map(|v| 2.0 * v - 1.0).reshape([1, 1, h, w])?);
        let mut taps = Vec::with_capacity(3);
        for layer in &self.layers {
            x = g.relu(layer.forward(&g, &vars, x)?)?;
            taps.push(unit_normalize(&g.value(x)));
        }
        Ok(taps)
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new(PERCEPTUAL_SEED)
    }
}

/// Scales each spatial position's channel vector to unit length.
fn unit_normalize(t: &Tensor) -> Tensor {
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    let mut out = t.clone();
    let d = out.data_mut();
    for i in 0..hw {
        let norm = (0..c).map(|k| d[k * hw + i].powi(2)).sum::<f64>().sqrt() + 1e-10;
        (0..c).for_each(|k| d[k * hw + i] /= norm);
    }
    out
}

/// `Σ_l w_l · mean_{hw} ‖φ̂_l(x) − φ̂_l(y)‖²`.
pub fn lpips(x: &Tensor, y: &Tensor, net: &PerceptualNet, cfg: &MetricConfig) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (fx, fy) = (net.features(x)?, net.features(y)?);
    let mut total = 0.0;
    for ((a, b), w) in fx.iter().zip(&fy).zip(cfg.lpips_weights) {
        let cells = (a.shape()[2] * a.shape()[3]) as f64;
        let d: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        total += w * d / cells;
    }
    Ok(total)
}
