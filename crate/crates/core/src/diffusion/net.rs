use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv, Linear};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// Anything that predicts the noise component of `x_t` given the condition mask.
///
/// `x_t` and `mask` are single `[H, W]` images; the result has the same shape.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &Tensor, mask: &Tensor, t: usize) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { base_width: 32, time_dim: 64 }
    }
}

/// Sinusoidal embedding of integer timesteps: `[sin(t·f_i), cos(t·f_i)]`
/// with `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; ts.len() * dim];
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data[b * dim + i] = arg.sin();
            data[b * dim + half + i] = arg.cos();
        }
    }
    Tensor::new([ts.len(), dim], data).expect("embedding shape")
}

/// Two-level U-Net-lite predicting ε from `[x_t, mask]`.
///
/// ```text
/// [x_t | y] ─conv─(+t)─conv─ h1 ─────────────────────┐
///                             └─conv/2─(+t)─conv─ up2 ┴─concat─conv─conv→ ε̂
/// ```
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    time1: Linear,
    time2: Linear,
    enc1: Conv,
    enc2: Conv,
    down: Conv,
    mid: Conv,
    up: Conv,
    out: Conv,
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        let w = config.base_width;
        let mut p = ParamSet::new();
        let time1 = Linear::new(&mut p, "time1", config.time_dim, w, rng);
        let time2 = Linear::new(&mut p, "time2", config.time_dim, 2 * w, rng);
        let enc1 = Conv::new(&mut p, "enc1", 2, w, 3, 1, 1.0, rng);
        let enc2 = Conv::new(&mut p, "enc2", w, w, 3, 1, 1.0, rng);
        let down = Conv::new(&mut p, "down", w, 2 * w, 3, 2, 1.0, rng);
        let mid = Conv::new(&mut p, "mid", 2 * w, 2 * w, 3, 1, 1.0, rng);
        let up = Conv::new(&mut p, "up", 3 * w, w, 3, 1, 1.0, rng);
        // small output init keeps the untrained prediction close to zero
        let out = Conv::new(&mut p, "out", w, 1, 3, 1, 0.1, rng);
        Self { config, params: p, time1, time2, enc1, enc2, down, mid, up, out }
    }

    /// Forward on a batch: `x_t`, `mask` are `[B,1,H,W]`, `ts` has length `B`.
    pub fn forward(&self, g: &Graph, vars: &[Var], x_t: Var, mask: Var, ts: &[usize]) -> Result<Var> {
        let shape = g.shape(x_t);
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(shape_err(format!("denoiser input must be [B,1,H,W], got {shape:?}")));
        };
        if c != 1 || g.shape(mask) != shape || ts.len() != b {
            return Err(shape_err(format!(
                "denoiser input {shape:?}, mask {:?}, {} timesteps",
                g.shape(mask),
                ts.len()
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!("denoiser needs even image extents, got {h}x{w}")));
        }
        let width = self.config.base_width;
        let emb = g.constant(timestep_embedding(ts, self.config.time_dim));
        let t1 = g.reshape(self.time1.forward(g, vars, emb)?, [b, width, 1, 1])?;
        let t2 = g.reshape(self.time2.forward(g, vars, emb)?, [b, 2 * width, 1, 1])?;

        let inp = g.concat(&[x_t, mask], 1)?;
        let h0 = g.silu(g.add(self.enc1.forward(g, vars, inp)?, t1)?)?;
        let h1 = g.silu(self.enc2.forward(g, vars, h0)?)?;
        let d = g.silu(g.add(self.down.forward(g, vars, h1)?, t2)?)?;
        let d = g.silu(self.mid.forward(g, vars, d)?)?;
        let u = g.concat(&[g.upsample2x(d)?, h1], 1)?;
        let u = g.silu(self.up.forward(g, vars, u)?)?;
        self.out.forward(g, vars, u)
    }

    /// Inference on a `[B,1,H,W]` batch without tracking gradients.
    pub fn predict_batch(&self, x_t: &Tensor, mask: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let g = Graph::new();
        let vars = self.params.bind_frozen(&g);
        let x = g.constant(x_t.clone());
        let m = g.constant(mask.clone());
        let y = self.forward(&g, &vars, x, m, ts)?;
        let out = g.value(y).clone();
        Ok(out)
    }
}

impl NoisePredictor for DenoiserNet {
    fn predict_noise(&self, x_t: &Tensor, mask: &Tensor, t: usize) -> Result<Tensor> {
        let &[h, w] = x_t.shape() else {
            return Err(shape_err(format!("expected an [H,W] image, got {:?}", x_t.shape())));
        };
        let x = x_t.clone().reshape([1, 1, h, w])?;
        let m = mask.clone().reshape([1, 1, h, w])?;
        self.predict_batch(&x, &m, &[t])?.reshape([h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn embedding_values() {
        let e = timestep_embedding(&[0, 3], 4);
        assert_eq!(e.shape(), &[2, 4]);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut r = rng::seeded(1);
        let net = DenoiserNet::new(DenoiserConfig { base_width: 4, time_dim: 8 }, &mut r);
        let x = Tensor::randn([8, 8], &mut r);
        let m = Tensor::full([8, 8], 1.0);
        let a = net.predict_noise(&x, &m, 3).unwrap();
        let b = net.predict_noise(&x, &m, 3).unwrap();
        assert_eq!(a.shape(), &[8, 8]);
        assert_eq!(a, b);
        let c = net.predict_noise(&x, &m, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_odd_extent() {
        let mut r = rng::seeded(1);
        let net = DenoiserNet::new(DenoiserConfig { base_width: 2, time_dim: 4 }, &mut r);
        let x = Tensor::zeros([7, 7]);
        assert!(net.predict_noise(&x, &x, 0).is_err());
    }
}
