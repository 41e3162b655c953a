use rand::Rng;

use super::net::{DenoiserNet, NoisePredictor};
use super::schedule::NoiseSchedule;
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::Execution;
use crate::nn::mse_loss;
use crate::rng;
use crate::tensor::{AdamState, Graph, Tensor, Var};

/// One forward step: `√(1−β_t)·x_prev + √β_t·ε`, ε drawn from `rng`.
pub fn q_step<R: Rng + ?Sized>(x_prev: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Tensor> {
    schedule.check_t(t)?;
    let eps = Tensor::randn(x_prev.shape().to_vec(), rng);
    let (a, b) = ((1.0 - schedule.beta(t)).sqrt(), schedule.beta(t).sqrt());
    x_prev.zip_map(&eps, |x, e| a * x + b * e)
}

/// Closed-form marginal: `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, schedule: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    q_sample_with(x0, schedule.alpha_bar(t), eps)
}

/// [`q_sample`] for an explicit cumulative coefficient `alpha_bar`.
pub fn q_sample_with(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(shape_err(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// A training batch of `[B,1,H,W]` images in `[0,1]` with binary masks.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Tensor,
    pub masks: Tensor,
}

impl TrainBatch {
    /// Stacks `[H,W]` images and masks into a batch.
    pub fn from_pairs(images: &[Tensor], masks: &[Tensor]) -> Result<Self> {
        if images.len() != masks.len() || images.is_empty() {
            return Err(invalid("batch needs equally many (>0) images and masks"));
        }
        let images = Tensor::stack(images)?;
        let masks = Tensor::stack(masks)?;
        let &[b, h, w] = images.shape() else {
            return Err(shape_err(format!("images must be [H,W], got batch {:?}", images.shape())));
        };
        if masks.shape() != images.shape() {
            return Err(shape_err(format!("masks {:?} vs images {:?}", masks.shape(), images.shape())));
        }
        Ok(Self { images: images.reshape([b, 1, h, w])?, masks: masks.reshape([b, 1, h, w])? })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 || self.images.shape() != self.masks.shape() {
            return Err(shape_err(format!("images {:?}, masks {:?}", self.images.shape(), self.masks.shape())));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("training images must lie in [0,1]"));
        }
        if self.masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid("masks must be binary"));
        }
        Ok(())
    }
}

/// `L_simple` on a batch for fixed timesteps and noise; returns the loss var.
pub fn diffusion_loss(
    net: &DenoiserNet,
    g: &Graph,
    vars: &[Var],
    batch: &TrainBatch,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let b = batch.len();
    if ts.len() != b || eps.shape() != batch.images.shape() {
        return Err(shape_err("timesteps/noise do not match the batch"));
    }
    let per = batch.images.len() / b;
    let mut x_t = Vec::with_capacity(batch.images.len());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let (a, s) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
        let x0 = &batch.images.data()[i * per..(i + 1) * per];
        let e = &eps.data()[i * per..(i + 1) * per];
        x_t.extend(x0.iter().zip(e).map(|(x, e)| a * x + s * e));
    }
    let x_t = g.constant(Tensor::new(batch.images.shape().to_vec(), x_t)?);
    let mask = g.constant(batch.masks.clone());
    let target = g.constant(eps.clone());
    let pred = net.forward(g, vars, x_t, mask, ts)?;
    mse_loss(g, pred, target)
}

/// Draws `t ~ U[0,T)` and `ε ~ N(0,I)` per item, takes one optimizer step on
/// `L_simple`, returns the loss before the step.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut DenoiserNet,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
    opt: &mut AdamState,
) -> Result<f64> {
    batch.validate()?;
    let ts: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(0..schedule.steps())).collect();
    let eps = Tensor::randn(batch.images.shape().to_vec(), rng);
    let g = Graph::new();
    let vars = net.params.bind(&g);
    let loss = diffusion_loss(net, &g, &vars, batch, &ts, &eps, schedule)
        .map_err(|e| numeric_context(e, "diffusion training step"))?;
    let value = g.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("diffusion training loss".into()));
    }
    let mut grads = g.backward(loss)?;
    net.params.accumulate(&vars, &mut grads)?;
    opt.step(&mut net.params)?;
    Ok(value)
}

fn numeric_context(e: Error, what: &str) -> Error {
    match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{op} during {what}")),
        other => other,
    }
}

/// One reverse step; returns `(x_{t−1}, ε̂)`.
///
/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, plus `√β_t·z` for `t > 0`.
pub fn p_sample_step_with_eps<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    x_t: &Tensor,
    t: usize,
    mask: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    schedule.check_t(t)?;
    let eps_hat = net.predict_noise(x_t, mask, t)?;
    if eps_hat.shape() != x_t.shape() {
        return Err(shape_err(format!("predicted noise {:?} for image {:?}", eps_hat.shape(), x_t.shape())));
    }
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let mut next = x_t.zip_map(&eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e))?;
    if t > 0 {
        let sigma = beta.sqrt();
        let z = Tensor::randn(x_t.shape().to_vec(), rng);
        next.data_mut().iter_mut().zip(z.data()).for_each(|(v, z)| *v += sigma * z);
    }
    Ok((next, eps_hat))
}

pub fn p_sample_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    x_t: &Tensor,
    t: usize,
    mask: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    Ok(p_sample_step_with_eps(net, x_t, t, mask, schedule, rng)?.0)
}

/// Snapshot of the reverse chain at timestep `t` (input `x_t` and the noise predicted from it).
#[derive(Clone, Debug)]
pub struct TrajectoryFrame {
    pub t: usize,
    pub x_t: Tensor,
    pub eps_hat: Tensor,
    /// Mean of `|ε̂|`.
    pub eps_mag: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub image: Tensor,
    pub frames: Vec<TrajectoryFrame>,
}

fn validate_mask(mask: &Tensor) -> Result<()> {
    if mask.rank() != 2 {
        return Err(shape_err(format!("mask must be [H,W], got {:?}", mask.shape())));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("condition mask must be binary"));
    }
    Ok(())
}

/// Whether timestep `t` is recorded when walking down from `T−1` with `stride`.
///
/// `T−1` and `0` are always kept; in between every `stride`-th step counting
/// down from `T−1`.
pub fn is_recorded(t: usize, steps: usize, stride: usize) -> bool {
    t == 0 || (steps - 1 - t).is_multiple_of(stride)
}

/// Full reverse chain from `x_T ~ N(0,I)` conditioned on `mask`; the result is
/// clamped to `[0,1]` at the end only. With `record_stride` set, frames are
/// kept per [`is_recorded`], in decreasing `t`.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    mask: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    record_stride: Option<usize>,
) -> Result<SampleOutput> {
    validate_mask(mask)?;
    if record_stride == Some(0) {
        return Err(invalid("trajectory stride must be >= 1"));
    }
    let steps = schedule.steps();
    let mut x = Tensor::randn(mask.shape().to_vec(), rng);
    let mut frames = Vec::new();
    for t in (0..steps).rev() {
        let (next, eps_hat) = p_sample_step_with_eps(net, &x, t, mask, schedule, rng)
            .map_err(|e| numeric_context(e, &format!("reverse step t={t}")))?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("reverse step t={t}")));
        }
        if let Some(stride) = record_stride {
            if is_recorded(t, steps, stride) {
                let eps_mag = eps_hat.data().iter().map(|v| v.abs()).sum::<f64>() / eps_hat.len() as f64;
                frames.push(TrajectoryFrame { t, x_t: x.clone(), eps_hat, eps_mag });
            }
        }
        x = next;
    }
    Ok(SampleOutput { image: x.clamp(0.0, 1.0), frames })
}

/// Reverse chain keeping frames every `stride` steps (plus the first and last).
pub fn trajectory<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    mask: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    stride: usize,
) -> Result<Vec<TrajectoryFrame>> {
    if stride == 0 {
        return Err(invalid("trajectory stride must be >= 1"));
    }
    Ok(sample(net, mask, schedule, rng, Some(stride))?.frames)
}

/// Samples one image per mask; item `i` uses the random stream `(seed, i)`.
pub fn sample_many<P: NoisePredictor + ?Sized>(
    net: &P,
    masks: &[Tensor],
    schedule: &NoiseSchedule,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Tensor>> {
    exec.try_map(masks.len(), |i| {
        let mut r = rng::derived(seed, i as u64);
        sample(net, &masks[i], schedule, &mut r, None).map(|s| s.image)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;

    struct ZeroNet;
    impl NoisePredictor for ZeroNet {
        fn predict_noise(&self, x_t: &Tensor, _: &Tensor, _: usize) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape().to_vec()))
        }
    }

    /// Predicts exactly the given ε.
    struct OracleNet(Tensor);
    impl NoisePredictor for OracleNet {
        fn predict_noise(&self, _: &Tensor, _: &Tensor, _: usize) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn q_step_limits() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.0]);
        let tiny = NoiseSchedule::linear(1, 1e-14, 1e-14).unwrap();
        let y = q_step(&x, 0, &tiny, &mut rng::seeded(0)).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);

        let big = NoiseSchedule::linear(1, 1.0 - 1e-12, 1.0 - 1e-12).unwrap();
        let zero = Tensor::zeros([3]);
        let y = q_step(&zero, 0, &big, &mut rng::seeded(5)).unwrap();
        let eps = Tensor::randn([3], &mut rng::seeded(5));
        assert!(y.max_abs_diff(&eps).unwrap() < 1e-6);
        assert!(q_step(&x, 1, &tiny, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn q_step_variance_monte_carlo() {
        let s = NoiseSchedule::linear(10, 0.05, 0.3).unwrap();
        let t = 6;
        let mut r = rng::seeded(11);
        let n = 10_000;
        let zero = Tensor::zeros([1]);
        let draws: Vec<f64> = (0..n).map(|_| q_step(&zero, t, &s, &mut r).unwrap().data()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - s.beta(t)).abs() < 0.05 * s.beta(t), "{var} vs {}", s.beta(t));
    }

    #[test]
    fn q_sample_identities() {
        let x0 = Tensor::from_vec(vec![0.2, 0.9]);
        let eps = Tensor::from_vec(vec![1.5, -0.5]);
        assert_eq!(q_sample_with(&x0, 1.0, &eps).unwrap(), x0);
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        let z = q_sample(&Tensor::zeros([2]), 3, &s, &eps).unwrap();
        let k = (1.0 - s.alpha_bar(3)).sqrt();
        assert_eq!(z.data(), &[k * 1.5, k * -0.5]);
        assert!(q_sample(&x0, 0, &s, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn terminal_step_is_exact_mean() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let x = Tensor::from_vec(vec![0.5, -0.2]);
        let eps = Tensor::from_vec(vec![0.3, 0.1]);
        let net = OracleNet(eps.clone());
        let a = p_sample_step(&net, &x, 0, &x, &s, &mut rng::seeded(1)).unwrap();
        let b = p_sample_step(&net, &x, 0, &x, &s, &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
        let coef = s.beta(0) / (1.0 - s.alpha_bar(0)).sqrt();
        let mu: Vec<f64> = x.data().iter().zip(eps.data()).map(|(x, e)| (x - coef * e) / s.alpha(0).sqrt()).collect();
        assert_eq!(a.data(), mu.as_slice());
    }

    #[test]
    fn zero_noise_identity_limit() {
        let s = NoiseSchedule::linear(4, 1e-14, 1e-14).unwrap();
        let x = Tensor::from_vec(vec![0.4, 0.8]);
        let y = p_sample_step(&ZeroNet, &x, 2, &x, &s, &mut rng::seeded(3)).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn oracle_noise_recovers_posterior_mean() {
        // with the true ε, μ_θ equals the posterior mean of q(x_{t-1} | x_t, x0):
        // (√ᾱ_{t-1} β_t/(1−ᾱ_t)) x0 + (√α_t (1−ᾱ_{t-1})/(1−ᾱ_t)) x_t
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let t = 5;
        let x0 = Tensor::from_vec(vec![0.3, 0.7, -0.1]);
        let eps = Tensor::from_vec(vec![0.5, -1.2, 0.8]);
        let xt = q_sample(&x0, t, &s, &eps).unwrap();
        let net = OracleNet(eps);
        let n = 20_000;
        let mut r = rng::seeded(9);
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let y = p_sample_step(&net, &xt, t, &x0, &s, &mut r).unwrap();
            mean.iter_mut().zip(y.data()).for_each(|(m, v)| *m += v / n as f64);
        }
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let c0 = abp.sqrt() * s.beta(t) / (1.0 - ab);
        let ct = s.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
        let se = (s.beta(t) / n as f64).sqrt();
        for i in 0..3 {
            let post = c0 * x0.data()[i] + ct * xt.data()[i];
            assert!((mean[i] - post).abs() < 4.0 * se, "{} vs {post}", mean[i]);
        }
    }

    #[test]
    fn single_step_sample_is_affine_in_noise() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let mask = Tensor::full([2, 2], 1.0);
        let out = sample(&ZeroNet, &mask, &s, &mut rng::seeded(4), None).unwrap();
        let x_t = Tensor::randn([2, 2], &mut rng::seeded(4));
        let expected = x_t.map(|v| (v / 0.5f64.sqrt()).clamp(0.0, 1.0));
        assert_eq!(out.image, expected);
    }

    #[test]
    fn sample_rejects_non_binary_mask() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let mask = Tensor::full([2, 2], 0.5);
        assert!(sample(&ZeroNet, &mask, &s, &mut rng::seeded(0), None).is_err());
    }

    #[test]
    fn trajectory_frame_counts() {
        let mask = Tensor::full([2, 2], 1.0);
        for (steps, stride) in [(10, 10), (10, 4), (7, 2), (5, 1), (1, 1), (12, 5)] {
            let s = NoiseSchedule::linear(steps, 0.01, 0.2).unwrap();
            let frames = trajectory(&ZeroNet, &mask, &s, &mut rng::seeded(0), stride).unwrap();
            let ts: Vec<usize> = frames.iter().map(|f| f.t).collect();
            assert_eq!(ts.first(), Some(&(steps - 1)));
            assert_eq!(ts.last(), Some(&0));
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
            if stride == 1 || (steps - 1) % stride != 0 {
                assert_eq!(frames.len(), ((steps - 1) / stride + 2).min(steps), "T={steps} s={stride}");
            }
            for f in &frames {
                assert!(f.eps_mag >= 0.0);
            }
        }
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        assert_eq!(trajectory(&ZeroNet, &mask, &s, &mut rng::seeded(0), 10).unwrap().len(), 2);
        assert!(trajectory(&ZeroNet, &mask, &s, &mut rng::seeded(0), 0).is_err());
    }

    #[test]
    fn sample_is_clamped_and_deterministic() {
        let mut r = rng::seeded(2);
        let net = DenoiserNet::new(DenoiserConfig { base_width: 4, time_dim: 8 }, &mut r);
        let s = NoiseSchedule::scaled_linear(6).unwrap();
        let mask = Tensor::from_fn([8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let a = sample(&net, &mask, &s, &mut rng::seeded(7), None).unwrap().image;
        let b = sample(&net, &mask, &s, &mut rng::seeded(7), None).unwrap().image;
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn sample_many_matches_modes() {
        let mut r = rng::seeded(2);
        let net = DenoiserNet::new(DenoiserConfig { base_width: 4, time_dim: 8 }, &mut r);
        let s = NoiseSchedule::scaled_linear(4).unwrap();
        let masks = vec![Tensor::full([4, 4], 1.0), Tensor::zeros([4, 4]), Tensor::full([4, 4], 1.0)];
        let a = sample_many(&net, &masks, &s, 3, Execution::Sequential).unwrap();
        let b = sample_many(&net, &masks, &s, 3, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn untrained_loss_near_one() {
        let mut r = rng::seeded(21);
        let net = DenoiserNet::new(DenoiserConfig::default(), &mut r);
        let img = Tensor::from_fn([8, 8], |i| (i % 8) as f64 / 8.0);
        let mask = Tensor::from_fn([8, 8], |i| if (i / 8) > 2 { 1.0 } else { 0.0 });
        let batch = TrainBatch::from_pairs(&[img.clone(), img], &[mask.clone(), mask]).unwrap();
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let mut total = 0.0;
        for k in 0..8 {
            let mut rr = rng::seeded(100 + k);
            let ts: Vec<usize> = (0..2).map(|_| rr.random_range(0..50)).collect();
            let eps = Tensor::randn([2, 1, 8, 8], &mut rr);
            let g = Graph::new();
            let vars = net.params.bind_frozen(&g);
            total += g.scalar(diffusion_loss(&net, &g, &vars, &batch, &ts, &eps, &s).unwrap()).unwrap();
        }
        let mean = total / 8.0;
        assert!(mean > 0.5 && mean < 2.0, "{mean}");
    }

    #[test]
    fn train_step_validates_batch() {
        let mut r = rng::seeded(1);
        let mut net = DenoiserNet::new(DenoiserConfig { base_width: 2, time_dim: 4 }, &mut r);
        let mut opt = AdamState::new(crate::tensor::AdamConfig::with_lr(1e-3), &net.params);
        let s = NoiseSchedule::scaled_linear(5).unwrap();
        let bad = TrainBatch::from_pairs(&[Tensor::full([4, 4], 1.5)], &[Tensor::zeros([4, 4])]).unwrap();
        assert!(train_step(&mut net, &bad, &s, &mut r, &mut opt).is_err());
        let bad_mask = TrainBatch::from_pairs(&[Tensor::zeros([4, 4])], &[Tensor::full([4, 4], 0.3)]).unwrap();
        assert!(train_step(&mut net, &bad_mask, &s, &mut r, &mut opt).is_err());
    }
}
