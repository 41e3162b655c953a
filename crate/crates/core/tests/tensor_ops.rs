use proptest::prelude::*;
use protodiff::rng;
use protodiff::tensor::kernels::{self, ConvGeometry};
use protodiff::tensor::{grad_check, read_checkpoint, write_checkpoint};
use protodiff::{Execution, Graph, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

/// Direct definition of a zero-padded strided cross-correlation.
fn naive_conv(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.output_hw().unwrap();
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                let ix = (x * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let iv = input[((b * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                let kv = kernel[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((b * g.out_channels + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn values(len: usize, seed: u64) -> Vec<f64> {
    Tensor::uniform([len], -1.0, 1.0, &mut rng::seeded(seed)).into_data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let a = values(m * k, seed);
        let b = values(k * n, seed ^ 1);
        let expected = naive_matmul(&a, &b, m, k, n);
        for exec in [Execution::Sequential, Execution::Parallel] {
            prop_assert!(close(&kernels::matmul(&a, &b, m, k, n, exec), &expected, 1e-12));
        }
    }

    #[test]
    fn conv_matches_direct_sum(
        batch in 1usize..3, cin in 1usize..3, cout in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, seed in any::<u64>(),
    ) {
        let g = ConvGeometry {
            batch, in_channels: cin, height: h, width: w, out_channels: cout,
            kernel_h: k, kernel_w: k, stride, padding: k / 2,
        };
        let input = values(batch * cin * h * w, seed);
        let kernel = values(cout * cin * k * k, seed ^ 7);
        let expected = naive_conv(&input, &kernel, &g);
        let seq = kernels::conv2d_forward(&input, &kernel, &g, Execution::Sequential);
        let par = kernels::conv2d_forward(&input, &kernel, &g, Execution::Parallel);
        prop_assert!(close(&seq, &expected, 1e-12));
        prop_assert_eq!(seq, par);
    }

    #[test]
    fn conv_backward_is_the_adjoint(
        cin in 1usize..3, cout in 1usize..3, h in 3usize..7, stride in 1usize..3, seed in any::<u64>(),
    ) {
        // <conv(x, k), y> = <x, conv_input^T(y, k)> = <k, conv_kernel^T(y, x)>
        let g = ConvGeometry {
            batch: 2, in_channels: cin, height: h, width: h, out_channels: cout,
            kernel_h: 3, kernel_w: 3, stride, padding: 1,
        };
        let (oh, ow) = g.output_hw().unwrap();
        let x = values(2 * cin * h * h, seed);
        let k = values(cout * cin * 9, seed ^ 3);
        let y = values(2 * cout * oh * ow, seed ^ 5);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&naive_conv(&x, &k, &g), &y);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let gx = kernels::conv2d_backward_input(&y, &k, &g, exec);
            let gk = kernels::conv2d_backward_kernel(&y, &x, &g, exec);
            prop_assert!((dot(&x, &gx) - lhs).abs() < 1e-10);
            prop_assert!((dot(&k, &gk) - lhs).abs() < 1e-10);
        }
    }

    #[test]
    fn pairwise_distance_matches_definition(n in 1usize..6, m in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
        let a = values(n * d, seed);
        let b = values(m * d, seed ^ 9);
        let out = kernels::pairwise_sq_dist(&a, &b, n, m, d, Execution::Parallel);
        for i in 0..n {
            for j in 0..m {
                let e: f64 = (0..d).map(|c| (a[i * d + c] - b[j * d + c]).powi(2)).sum();
                prop_assert!((out[i * m + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let g = Graph::new();
        let x = g.constant(Tensor::new([rows, cols], values(rows * cols, seed).iter().map(|v| v * scale).collect()).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
        let len = shape.iter().product();
        let t = Tensor::new(shape.clone(), values(len, seed)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".to_string(), t.clone())]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, vec![("w".to_string(), t)]);
    }
}

#[test]
fn checkpoint_rejects_truncation_and_bad_magic() {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &[("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]))]).unwrap();
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice()).is_err());
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut r = rng::seeded(3);
    let x = Tensor::uniform([2, 3], 0.5, 1.5, &mut r);
    let other = Tensor::uniform([2, 3], 0.5, 1.5, &mut r);
    let row = Tensor::uniform([1, 3], -1.0, 1.0, &mut r);
    let weights = Tensor::uniform([3, 4], -1.0, 1.0, &mut r);
    let cases: Vec<(&str, Box<dyn Fn(&Graph, protodiff::Var) -> protodiff::Result<protodiff::Var>>)> = vec![
        ("add", Box::new(|g, x| { let b = g.constant(row.clone()); g.sum(g.add(x, b)?) })),
        ("sub", Box::new(|g, x| { let b = g.constant(other.clone()); g.sum(g.square(g.sub(x, b)?)?) })),
        ("mul", Box::new(|g, x| { let b = g.constant(other.clone()); g.sum(g.mul(x, b)?) })),
        ("div", Box::new(|g, x| { let b = g.constant(other.clone()); g.sum(g.div(b, x)?) })),
        ("exp", Box::new(|g, x| g.sum(g.exp(x)?))),
        ("log", Box::new(|g, x| g.sum(g.log(x)?))),
        ("silu", Box::new(|g, x| g.sum(g.silu(g.add_scalar(x, -1.0)?)?))),
        ("relu", Box::new(|g, x| g.sum(g.relu(g.add_scalar(x, -1.01)?)?))),
        ("matmul", Box::new(|g, x| { let w = g.constant(weights.clone()); g.sum(g.square(g.matmul(x, w)?)?) })),
        ("softmax", Box::new(|g, x| { let w = g.constant(other.clone()); g.sum(g.mul(g.softmax(x, 1)?, w)?) })),
        ("mean_axis", Box::new(|g, x| g.sum(g.square(g.mean_axis(x, 0)?)?))),
        ("min_axis", Box::new(|g, x| Ok(g.sum(g.square(g.min_axis(x, 1)?.0)?)?))),
        ("permute", Box::new(|g, x| g.sum(g.square(g.matmul(g.permute(x, &[1, 0])?, x)?)?))),
        ("pairwise", Box::new(|g, x| { let b = g.constant(other.clone()); g.sum(g.exp(g.neg(g.pairwise_sq_dist(x, b)?)?)?) })),
        ("gather", Box::new(|g, x| g.sum(g.square(g.gather(x, &[1, 0, 1])?)?))),
    ];
    for (name, f) in &cases {
        let report = grad_check(|g, x| f(g, x), &x, 1e-4).unwrap();
        assert!(report.passed, "{name}: rel error {}", report.max_rel_error);
    }
}

#[test]
fn conv_and_upsample_gradients_match_finite_differences() {
    let mut r = rng::seeded(8);
    let x = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut r);
    let k = Tensor::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
    for stride in [1, 2] {
        let kernel = k.clone();
        let report = grad_check(
            |g, x| {
                let kv = g.constant(kernel.clone());
                g.sum(g.square(g.conv2d(x, kv, stride, 1)?)?)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "conv input grad, stride {stride}: {}", report.max_rel_error);
        let input = x.clone();
        let report = grad_check(
            |g, k| {
                let xv = g.constant(input.clone());
                g.sum(g.square(g.conv2d(xv, k, stride, 1)?)?)
            },
            &k,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "conv kernel grad, stride {stride}: {}", report.max_rel_error);
    }
    let report = grad_check(|g, x| g.sum(g.square(g.upsample2x(x)?)?), &x, 1e-4).unwrap();
    assert!(report.passed);
}

#[test]
fn graph_results_do_not_depend_on_execution_mode() {
    let mut r = rng::seeded(21);
    let x = Tensor::randn([3, 2, 8, 8], &mut r);
    let k = Tensor::randn([4, 2, 3, 3], &mut r);
    let run = |exec| {
        let g = Graph::with_execution(exec);
        let xv = g.param(x.clone());
        let kv = g.param(k.clone());
        let y = g.sum(g.square(g.conv2d(xv, kv, 2, 1).unwrap()).unwrap()).unwrap();
        let mut grads = g.backward(y).unwrap();
        (g.scalar(y).unwrap(), grads.take(xv).unwrap(), grads.take(kv).unwrap())
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
