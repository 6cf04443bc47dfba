//! Autograd engine checks against independent reference implementations.

use evsr_core::autograd::{conv2d_forward, conv_transpose2d_forward, grad_check, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop cross-correlation, written without any im2col/GEMM.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape();
    let [o, _, kh, kw] = w.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor::from_fn([n, o, oh, ow], |[bn, oc, oy, ox]| {
        let mut s = b.map_or(0.0, |b| b.data()[oc]);
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += x.at([bn, ic, iy as usize, ix as usize]) * w.at([oc, ic, ky, kx]);
                    }
                }
            }
        }
        s
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn delta_kernel_is_identity() {
    let x = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let mut w = Tensor::zeros([1, 1, 3, 3]);
    w.set([0, 0, 1, 1], 1.0);
    let y = conv2d_forward(&x, &w, None, 1, 1);
    assert_eq!(y, x);
}

#[test]
fn ones_kernel_sums_to_nine() {
    let x = Tensor::full([1, 1, 3, 3], 1.0);
    let w = Tensor::full([1, 1, 3, 3], 1.0);
    let y = conv2d_forward(&x, &w, None, 1, 0);
    assert_eq!(y.shape(), [1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random([2, 4, 8, 8], &mut rng);
    let w = random([8, 4, 3, 3], &mut rng);
    let b = random([1, 8, 1, 1], &mut rng);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0), (3, 2)] {
        let fast = conv2d_forward(&x, &w, Some(&b), stride, pad);
        let slow = naive_conv(&x, &w, Some(&b), stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        let diff = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "stride {stride} pad {pad}: {diff}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for stride in [1, 2] {
        for pad in [0, 1] {
            for k in [1, 3, 8] {
                let (ci, co, size) = (3, 2, 12);
                // conv maps co-channel images of `size` to ci channels.
                let Some(g) = evsr_core::autograd::ConvGeometry::new(co, (size, size), (k, k), stride, pad) else {
                    continue;
                };
                // The transposed output size must reproduce `size`.
                if (g.out_h - 1) * stride + k - 2 * pad != size {
                    continue;
                }
                let w = random([ci, co, k, k], &mut rng);
                let x = random([2, co, size, size], &mut rng);
                let y = random([2, ci, g.out_h, g.out_w], &mut rng);
                let cx = conv2d_forward(&x, &w, None, stride, pad);
                let ty = conv_transpose2d_forward(&y, &w, None, stride, pad);
                assert_eq!(ty.shape(), x.shape());
                let (lhs, rhs) = (dot(&cx, &y), dot(&x, &ty));
                let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
                assert!(rel < 1e-10, "stride {stride} pad {pad} k {k}: {lhs} vs {rhs}");
            }
        }
    }
}

#[test]
fn conv_transpose_stride_two_spreads_blocks() {
    let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::full([1, 1, 2, 2], 1.0);
    let y = conv_transpose2d_forward(&x, &w, None, 2, 0);
    assert_eq!(y.shape(), [1, 1, 4, 4]);
    // Each input value covers its own 2x2 output block.
    let expected = Tensor::from_fn([1, 1, 4, 4], |[_, _, r, c]| x.at([0, 0, r / 2, c / 2]));
    assert_eq!(y, expected);
}

#[test]
fn conv_transpose_of_zero_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random([4, 3, 4, 4], &mut rng);
    let y = conv_transpose2d_forward(&Tensor::zeros([1, 4, 5, 5]), &w, None, 2, 1);
    assert_eq!(y.shape(), [1, 3, 10, 10]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap());
    let z = g.sub(x, x).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));

    let neg = g.constant(Tensor::scalar(-1.0));
    let slope = g.constant(Tensor::scalar(0.25));
    let p = g.prelu(neg, slope).unwrap();
    assert_eq!(g.value(p).item(), -0.25);

    let a = g.constant(Tensor::from_fn([2, 3, 2, 2], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f64));
    let b = g.constant(Tensor::from_fn([2, 5, 2, 2], |[n, c, h, w]| -((n * 1000 + c * 100 + h * 10 + w) as f64)));
    let cat = g.concat_channels(&[a, b]).unwrap();
    let v = g.value(cat);
    assert_eq!(v.shape(), [2, 8, 2, 2]);
    for n in 0..2 {
        for c in 0..8 {
            for h in 0..2 {
                for w in 0..2 {
                    let expect = if c < 3 {
                        g.value(a).at([n, c, h, w])
                    } else {
                        g.value(b).at([n, c - 3, h, w])
                    };
                    assert_eq!(v.at([n, c, h, w]), expect);
                }
            }
        }
    }
    assert!(g.add(a, b).is_err());
}

#[test]
fn backward_of_sum_is_ones_and_disconnected_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.parameter(Tensor::from_fn([1, 2, 3, 3], |[_, c, h, w]| (c + h * w) as f64));
    let unused = g.parameter(Tensor::full([1, 1, 2, 2], 5.0));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(unused).is_none());
    assert!(grads.get_or_zeros(unused, [1, 1, 2, 2]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.parameter(Tensor::full([1, 1, 2, 2], 1.0));
    let y = g.abs(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn conv_mean_square_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![random([1, 3, 6, 6], &mut rng), random([4, 3, 3, 3], &mut rng)];
    let report = grad_check(&params, 1e-5, 60, 7, |g, p| {
        let y = g.conv2d(p[0], p[1], None, 1, 1)?;
        let sq = g.square(y)?;
        g.mean(sq)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = random([1, 2, 6, 6], &mut rng);
    // Each closure ends in a smooth scalar reduction so only the op under
    // test contributes kinks.
    type Build = fn(&mut Graph<f64>, &[evsr_core::NodeId], &Tensor<f64>) -> Result<evsr_core::NodeId, evsr_core::autograd::GraphError>;
    let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "conv2d",
            vec![random([2, 3, 6, 6], &mut rng), random([2, 3, 3, 3], &mut rng), random([1, 2, 1, 1], &mut rng)],
            |g, p, _| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?;
                let s = g.square(y)?;
                g.sum(s)
            },
        ),
        (
            "conv2d_stride2",
            vec![random([1, 2, 7, 7], &mut rng), random([3, 2, 4, 4], &mut rng), random([1, 3, 1, 1], &mut rng)],
            |g, p, _| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?;
                let s = g.square(y)?;
                g.mean(s)
            },
        ),
        (
            "conv_transpose2d",
            vec![random([1, 3, 3, 3], &mut rng), random([3, 2, 4, 4], &mut rng), random([1, 2, 1, 1], &mut rng)],
            |g, p, t| {
                let y = g.conv_transpose2d(p[0], p[1], Some(p[2]), 2, 1)?;
                let t = g.constant(t.clone());
                let d = g.sub(y, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
        (
            "add_mul_scalar",
            vec![random([1, 2, 6, 6], &mut rng), random([1, 2, 6, 6], &mut rng)],
            |g, p, _| {
                let a = g.add(p[0], p[1])?;
                let m = g.mul_scalar(a, 1.7)?;
                let s = g.square(m)?;
                g.sum(s)
            },
        ),
        (
            "prelu",
            vec![random([1, 2, 6, 6], &mut rng), Tensor::scalar(0.3)],
            |g, p, t| {
                let y = g.prelu(p[0], p[1])?;
                let t = g.constant(t.clone());
                let d = g.sub(y, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
        (
            "concat",
            vec![random([1, 1, 6, 6], &mut rng), random([1, 1, 6, 6], &mut rng)],
            |g, p, t| {
                let c = g.concat_channels(&[p[0], p[1]])?;
                let t = g.constant(t.clone());
                let d = g.sub(c, t)?;
                let s = g.square(d)?;
                g.mean(s)
            },
        ),
        (
            "abs",
            vec![random([1, 2, 6, 6], &mut rng)],
            |g, p, t| {
                let t = g.constant(t.clone());
                let d = g.sub(p[0], t)?;
                let a = g.abs(d)?;
                g.mean(a)
            },
        ),
        (
            "scale_and_normalize",
            vec![random([1, 2, 6, 6], &mut rng)],
            |g, p, t| {
                let n = g.normalize_channels(p[0], 1e-10)?;
                let sc = g.scale_channels(n, vec![0.5, 2.0])?;
                let t = g.constant(t.clone());
                let d = g.sub(sc, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
    ];
    for (name, params, build) in cases {
        let target = &target;
        let report = grad_check(&params, 1e-4, 50, 11, |g, p| build(g, p, target)).unwrap();
        println!("{name}: max rel err {:.3e} over {}", report.max_rel_error, report.checked);
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random([1, 4, 16, 16], &mut rng).cast::<f32>();
    let w = random([8, 4, 3, 3], &mut rng).cast::<f32>();
    let a = conv2d_forward(&x, &w, None, 1, 1);
    let b = conv2d_forward(&x, &w, None, 1, 1);
    assert_eq!(a.data(), b.data());
}
