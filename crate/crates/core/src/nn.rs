//! Small layer helpers shared by the denoiser, the feature extractor and the
//! perceptual network.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};

/// 2-D convolution with bias, registered on a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let w = Tensor::randn([out_ch, in_ch, kernel, kernel], rng).map(|v| v * std);
        let weight = params.add(format!("{name}.weight"), w);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([1, out_ch, 1, 1]));
        Self { weight, bias, stride, padding: kernel / 2 }
    }

    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, vars[self.weight.index()], self.stride, self.padding)?;
        g.add(y, vars[self.bias.index()])
    }
}

/// Dense layer `x · W + b` on `[B, in]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = Tensor::randn([in_dim, out_dim], rng).map(|v| v * std);
        let weight = params.add(format!("{name}.weight"), w);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([1, out_dim]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, vars[self.weight.index()])?;
        g.add(y, vars[self.bias.index()])
    }
}

/// Mean squared error between two equally shaped vars.
pub fn mse_loss(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    g.mean(g.square(d)?)
}
