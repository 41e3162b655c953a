use rand::seq::SliceRandom;
use rand::Rng;

use super::features::FeatureMap;
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::Execution;
use crate::nn::{mse_loss, Conv};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractorConfig {
    /// Feature depth `D`.
    pub depth: usize,
    /// Channels of the first encoder layer (the second has twice as many).
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { depth: 16, width: 16, epochs: 20, batch_size: 8, learning_rate: 1e-3 }
    }
}

/// Conv encoder `[S,S] → f(x) ∈ R^{S/4 × S/4 × D}`, trained as the front half
/// of an autoencoder and then frozen.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub image_size: usize,
    pub params: ParamSet,
    layers: [Conv; 3],
    frozen: bool,
}

struct Decoder {
    params: ParamSet,
    layers: [Conv; 3],
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &ExtractorConfig, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let layers = [
            Conv::new(&mut p, "dec1", cfg.depth, 2 * cfg.width, 3, 1, 1.0, rng),
            Conv::new(&mut p, "dec2", 2 * cfg.width, cfg.width, 3, 1, 1.0, rng),
            Conv::new(&mut p, "dec3", cfg.width, 1, 3, 1, 1.0, rng),
        ];
        Self { params: p, layers }
    }

    fn forward(&self, g: &Graph, vars: &[Var], f: Var) -> Result<Var> {
        let h = g.silu(self.layers[0].forward(g, vars, g.upsample2x(f)?)?)?;
        let h = g.silu(self.layers[1].forward(g, vars, g.upsample2x(h)?)?)?;
        self.layers[2].forward(g, vars, h)
    }
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, image_size: usize, rng: &mut R) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(4) {
            return Err(invalid(format!("extractor image size must be a positive multiple of 4, got {image_size}")));
        }
        if config.depth == 0 || config.width == 0 {
            return Err(invalid("extractor depth and width must be >= 1"));
        }
        let mut p = ParamSet::new();
        let layers = [
            Conv::new(&mut p, "enc1", 1, config.width, 3, 1, 1.0, rng),
            Conv::new(&mut p, "enc2", config.width, 2 * config.width, 3, 2, 1.0, rng),
            Conv::new(&mut p, "enc3", 2 * config.width, config.depth, 3, 2, 1.0, rng),
        ];
        Ok(Self { config, image_size, params: p, layers, frozen: false })
    }

    /// Spatial extent `H = W = S/4` of the produced feature map.
    pub fn grid(&self) -> usize {
        self.image_size / 4
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.params.set_requires_grad(false);
        self.frozen = true;
    }

    /// `[B,1,S,S]` → `[B,D,S/4,S/4]`.
    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.silu(self.layers[0].forward(g, vars, x)?)?;
        let h = g.silu(self.layers[1].forward(g, vars, h)?)?;
        self.layers[2].forward(g, vars, h)
    }

    pub fn extract(&self, image: &Tensor) -> Result<FeatureMap> {
        if image.shape() != [self.image_size, self.image_size] {
            return Err(shape_err(format!(
                "extractor expects [{s},{s}] images, got {:?}",
                image.shape(),
                s = self.image_size
            )));
        }
        let g = Graph::with_execution(Execution::Sequential);
        let vars = self.params.bind_frozen(&g);
        let x = g.constant(image.clone().reshape([1, 1, self.image_size, self.image_size])?);
        let f = self.forward(&g, &vars, x)?;
        let out = g.value(f).clone();
        FeatureMap::from_channels_first(&out)
    }

    pub fn extract_all(&self, images: &[Tensor], exec: Execution) -> Result<Vec<FeatureMap>> {
        exec.try_map(images.len(), |i| self.extract(&images[i]))
    }
}

/// Reconstruction MSE before and after autoencoder training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractorReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn stack_batch(images: &[Tensor], idx: &[usize], s: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * s * s);
    for &i in idx {
        data.extend_from_slice(images[i].data());
    }
    Tensor::new([idx.len(), 1, s, s], data)
}

fn recon_loss(enc: &FeatureExtractor, dec: &Decoder, g: &Graph, ev: &[Var], dv: &[Var], x: &Tensor) -> Result<Var> {
    let xv = g.constant(x.clone());
    let f = enc.forward(g, ev, xv)?;
    let y = dec.forward(g, dv, f)?;
    mse_loss(g, y, xv)
}

fn dataset_loss(enc: &FeatureExtractor, dec: &Decoder, images: &[Tensor]) -> Result<f64> {
    let s = enc.image_size;
    let mut total = 0.0;
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(16) {
        let g = Graph::new();
        let (ev, dv) = (enc.params.bind_frozen(&g), dec.params.bind_frozen(&g));
        let l = recon_loss(enc, dec, &g, &ev, &dv, &stack_batch(images, chunk, s)?)?;
        total += g.scalar(l)? * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Trains encoder + throwaway decoder on image reconstruction, then freezes
/// the encoder.
pub fn train_extractor<R: Rng + ?Sized>(
    images: &[Tensor],
    config: ExtractorConfig,
    rng: &mut R,
) -> Result<(FeatureExtractor, ExtractorReport)> {
    let first = images.first().ok_or_else(|| invalid("cannot train the extractor on an empty dataset"))?;
    let &[s, s2] = first.shape() else {
        return Err(shape_err(format!("extractor trains on [S,S] images, got {:?}", first.shape())));
    };
    if s != s2 || images.iter().any(|im| im.shape() != first.shape()) {
        return Err(shape_err("extractor training images must be square and equally sized"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let mut enc = FeatureExtractor::new(config, s, rng)?;
    let mut dec = Decoder::new(&config, rng);
    let initial_loss = dataset_loss(&enc, &dec, images)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let (mut enc_opt, mut dec_opt) = (AdamState::new(adam, &enc.params), AdamState::new(adam, &dec.params));
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let g = Graph::new();
            let (ev, dv) = (enc.params.bind(&g), dec.params.bind(&g));
            let l = recon_loss(&enc, &dec, &g, &ev, &dv, &stack_batch(images, batch, s)?)?;
            if !g.scalar(l)?.is_finite() {
                return Err(Error::NonFinite(format!("extractor loss in epoch {epoch}")));
            }
            let mut grads = g.backward(l)?;
            enc.params.accumulate(&ev, &mut grads)?;
            dec.params.accumulate(&dv, &mut grads)?;
            enc_opt.step(&mut enc.params)?;
            dec_opt.step(&mut dec.params)?;
        }
        log::debug!("extractor epoch {epoch} done");
    }
    let final_loss = dataset_loss(&enc, &dec, images)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("extractor reconstruction loss".into()));
    }
    enc.freeze();
    Ok((enc, ExtractorReport { initial_loss, final_loss }))
}
