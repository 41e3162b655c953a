use proptest::prelude::*;
use protodiff::diffusion::{
    diffusion_loss, is_recorded, q_sample, q_step, sample, sample_many, DenoiserConfig, DenoiserNet, NoisePredictor,
    NoiseSchedule, TrainBatch,
};
use protodiff::tensor::grad_check_with_step;
use protodiff::{rng, Execution, Graph, Result, Tensor};

fn tiny_net(seed: u64) -> DenoiserNet {
    DenoiserNet::new(DenoiserConfig { base_width: 4, time_dim: 8 }, &mut rng::seeded(seed))
}

fn square_mask(n: usize) -> Tensor {
    Tensor::from_fn([n, n], |i| {
        let (y, x) = (i / n, i % n);
        if (n / 4..3 * n / 4).contains(&y) && (n / 4..3 * n / 4).contains(&x) { 1.0 } else { 0.0 }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedules_are_monotone(steps in 1usize..400, start in 1e-5f64..0.01, span in 0.0f64..0.2) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        let mut prod = 1.0;
        for t in 0..steps {
            prod *= 1.0 - s.beta(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            if t > 0 {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn q_sample_is_affine_in_noise(seed in any::<u64>(), t in 0usize..20) {
        let s = NoiseSchedule::scaled_linear(20).unwrap();
        let mut r = rng::seeded(seed);
        let x0 = Tensor::uniform([3, 3], 0.0, 1.0, &mut r);
        let eps = Tensor::randn([3, 3], &mut r);
        let xt = q_sample(&x0, t, &s, &eps).unwrap();
        let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        for ((x, e), y) in x0.data().iter().zip(eps.data()).zip(xt.data()) {
            prop_assert!((a * x + b * e - y).abs() < 1e-12);
        }
    }

    #[test]
    fn recorded_frames_cover_both_ends(steps in 1usize..200, stride in 1usize..30) {
        let kept: Vec<usize> = (0..steps).rev().filter(|&t| is_recorded(t, steps, stride)).collect();
        prop_assert_eq!(kept[0], steps - 1);
        prop_assert_eq!(*kept.last().unwrap(), 0);
        for w in kept.windows(2) {
            prop_assert!(w[0] - w[1] <= stride);
        }
    }
}

#[test]
fn iterated_q_step_matches_closed_form_moments() {
    let s = NoiseSchedule::linear(8, 0.05, 0.2).unwrap();
    let c = 0.7;
    let x0 = Tensor::from_vec(vec![c]);
    let n = 10_000;
    let mut r = rng::seeded(99);
    let t = 5;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let mut x = x0.clone();
            for k in 0..=t {
                x = q_step(&x, k, &s, &mut r).unwrap();
            }
            x.data()[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let ab = s.alpha_bar(t);
    let se_mean = ((1.0 - ab) / n as f64).sqrt();
    let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - ab.sqrt() * c).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "var {var}");
}

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    let net = tiny_net(4);
    let mut r = rng::seeded(5);
    let images = vec![Tensor::uniform([4, 4], 0.0, 1.0, &mut r), Tensor::uniform([4, 4], 0.0, 1.0, &mut r)];
    let masks = vec![square_mask(4), square_mask(4)];
    let batch = TrainBatch::from_pairs(&images, &masks).unwrap();
    let schedule = NoiseSchedule::scaled_linear(10).unwrap();
    let eps = Tensor::randn(batch.images.shape().to_vec(), &mut r);
    let ts = [2, 7];
    // gradient with respect to one decoder kernel
    let name = "up.weight";
    let id = net.params.find(name).unwrap();
    let point = net.params.get(id).clone();
    let report = grad_check_with_step(
        |g: &Graph, w| {
            let mut vars = net.params.bind_frozen(g);
            vars[id.index()] = w;
            diffusion_loss(&net, g, &vars, &batch, &ts, &eps, &schedule)
        },
        &point,
        1e-3,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{name}: {}", report.max_rel_error);
}

struct Zero;
impl NoisePredictor for Zero {
    fn predict_noise(&self, x: &Tensor, _: &Tensor, _: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape().to_vec()))
    }
}

#[test]
fn sampling_is_seeded_clamped_and_mode_independent() {
    let net = tiny_net(1);
    let s = NoiseSchedule::scaled_linear(6).unwrap();
    let masks = vec![square_mask(8), square_mask(8), square_mask(8)];
    let seq = sample_many(&net, &masks, &s, 3, Execution::Sequential).unwrap();
    let par = sample_many(&net, &masks, &s, 3, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
    assert!(seq.iter().all(|x| x.data().iter().all(|v| (0.0..=1.0).contains(v))));
    assert_ne!(seq[0], seq[1]);
    let out = sample(&Zero, &masks[0], &s, &mut rng::seeded(0), Some(2)).unwrap();
    let ts: Vec<usize> = out.frames.iter().map(|f| f.t).collect();
    assert_eq!(ts, vec![5, 3, 1, 0]);
    assert!(out.frames.iter().all(|f| f.eps_mag == 0.0));
}

#[test]
fn sampling_rejects_non_binary_masks() {
    let s = NoiseSchedule::scaled_linear(4).unwrap();
    let m = Tensor::full([4, 4], 0.5);
    assert!(sample(&Zero, &m, &s, &mut rng::seeded(0), None).is_err());
}

#[test]
fn overfitting_one_image_halves_the_loss() {
    use protodiff::diffusion::train_step;
    use protodiff::phantom::{downsample, random_phantom, PhantomStyle};
    use protodiff::tensor::{AdamConfig, AdamState};

    let p = downsample(&random_phantom(7, 16, PhantomStyle::default()).unwrap(), 2).unwrap();
    let batch = TrainBatch::from_pairs(&vec![p.image.clone(); 4], &vec![p.mask.clone(); 4]).unwrap();
    let s = NoiseSchedule::scaled_linear(50).unwrap();
    let mut r = rng::seeded(1);
    let mut net = DenoiserNet::new(DenoiserConfig::default(), &mut r);
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &net.params);
    let losses: Vec<f64> = (0..200).map(|_| train_step(&mut net, &batch, &s, &mut r, &mut opt).unwrap()).collect();
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail <= 0.5 * head, "{head} -> {tail}");
}
