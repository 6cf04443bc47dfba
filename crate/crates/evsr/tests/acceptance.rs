//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and fails if any gating criterion fails.
//!
//! The criteria share one process so that the timed ones (gradient checks,
//! toy training, smoke) are not slowed down by other tests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use evsr::checkpoint::{encode_weights, load_weights, save_weights};
use evsr::cli::{sample_spec, smoke, split_samples, SmokeArgs};
use evsr::config::{RunConfig, TextureFamily};
use evsr::dataset::{generate_dataset, load_dataset, EVENTS_FILE};
use evsr::eval::{constant_baseline, evaluate, mean_image};
use evsr::io::read_events;
use evsr::trainer::{train, TrainOptions};
use evsr_core::autograd::{grad_check, Graph, GraphError, NodeId, Tensor};
use evsr_core::events::{parse_event_text, write_event_text, Event, EventStream, Polarity};
use evsr_core::flow::{FlowField, Mask};
use evsr_core::image::GrayImage;
use evsr_core::loss::{l1_loss, lpips_loss, sim_loss, FeatureEncoder, ENCODER_SLOPE, ENCODER_WIDTHS, NORM_EPS};
use evsr_core::metrics::{mse, psnr, ssim, warp_error};
use evsr_core::network::{ArchConfig, ModelWeights, NetworkError, SequenceInput};
use evsr_core::simulator::{
    procedural_texture, render_frame, render_pair, CameraPair, EventGenerator, Pose, TextureKind, ThresholdModel,
};
use evsr_core::stacking::{build_sequence, build_stack, StackConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    /// Soft checks are reported but never fail the suite.
    gating: bool,
    detail: String,
}

impl Outcome {
    fn gate(pass: bool, detail: String) -> Self {
        Self {
            pass,
            gating: true,
            detail,
        }
    }
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn graph_err(e: NetworkError) -> GraphError {
    match e {
        NetworkError::Graph(g) => g,
        other => panic!("{other}"),
    }
}

// ---------------------------------------------------------------- gradients

type Build = fn(&mut Graph<f64>, &[NodeId], &Tensor<f64>) -> Result<NodeId, GraphError>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    vec![
        (
            "conv2d",
            vec![random([2, 3, 6, 6], rng), random([2, 3, 3, 3], rng), random([1, 2, 1, 1], rng)],
            |g, p, _| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?;
                let s = g.square(y)?;
                g.sum(s)
            },
        ),
        (
            "conv2d stride 2",
            vec![random([1, 2, 7, 7], rng), random([3, 2, 4, 4], rng), random([1, 3, 1, 1], rng)],
            |g, p, _| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?;
                let s = g.square(y)?;
                g.mean(s)
            },
        ),
        (
            "conv_transpose2d",
            vec![random([1, 3, 3, 3], rng), random([3, 2, 4, 4], rng), random([1, 2, 1, 1], rng)],
            |g, p, t| {
                let y = g.conv_transpose2d(p[0], p[1], Some(p[2]), 2, 1)?;
                let t = g.constant(t.clone());
                let d = g.sub(y, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
        (
            "add, sub, mul_scalar",
            vec![random([1, 2, 6, 6], rng), random([1, 2, 6, 6], rng)],
            |g, p, t| {
                let a = g.add(p[0], p[1])?;
                let m = g.mul_scalar(a, 1.7)?;
                let t = g.constant(t.clone());
                let d = g.sub(m, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
        (
            "prelu",
            vec![random([1, 2, 6, 6], rng), Tensor::scalar(0.3)],
            |g, p, t| {
                let y = g.prelu(p[0], p[1])?;
                let t = g.constant(t.clone());
                let d = g.sub(y, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
        (
            "concat_channels",
            vec![random([1, 1, 6, 6], rng), random([1, 1, 6, 6], rng)],
            |g, p, t| {
                let c = g.concat_channels(&[p[0], p[1]])?;
                let t = g.constant(t.clone());
                let d = g.sub(c, t)?;
                let s = g.square(d)?;
                g.mean(s)
            },
        ),
        (
            "abs, mean",
            vec![random([1, 2, 6, 6], rng)],
            |g, p, t| {
                let t = g.constant(t.clone());
                let d = g.sub(p[0], t)?;
                let a = g.abs(d)?;
                g.mean(a)
            },
        ),
        (
            "normalize_channels, scale_channels",
            vec![random([1, 2, 6, 6], rng)],
            |g, p, t| {
                let n = g.normalize_channels(p[0], 1e-10)?;
                let sc = g.scale_channels(n, vec![0.5, 2.0])?;
                let t = g.constant(t.clone());
                let d = g.sub(sc, t)?;
                let s = g.square(d)?;
                g.sum(s)
            },
        ),
    ]
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        stack_channels: 2,
        scale: 2,
        filters: 3,
        efr_filters: 3,
        c_blocks: 1,
        a_blocks: 1,
        b_blocks: 1,
        d_blocks: 1,
        mixer_filters: 3,
        sequence_length: 3,
    }
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = random([1, 2, 6, 6], &mut rng);
    let mut worst_op = (0.0f64, "");
    for (name, params, build) in op_cases(&mut rng) {
        let target = &target;
        let r = grad_check(&params, 1e-4, 50, 11, |g, p| build(g, p, target)).unwrap();
        if r.max_rel_error >= worst_op.0 {
            worst_op = (r.max_rel_error, name);
        }
    }

    // Full pipeline: EFR, RNet cell over three stacks, mixer and L_sim head.
    let arch = tiny_arch();
    let weights = ModelWeights::<f64>::init(arch, 22).unwrap();
    let levels = [-1.0, 0.0, 127.0 / 128.0];
    let (h, w) = (8, 8);
    let input = SequenceInput {
        stacks: (0..3)
            .map(|_| Tensor::from_fn([1, 2, h, w], |_| levels[rng.random_range(0..3)]))
            .collect(),
        flows: (0..3)
            .map(|k| {
                if k == 1 {
                    Tensor::zeros([1, 2, h, w])
                } else {
                    random([1, 2, h, w], &mut rng)
                }
            })
            .collect(),
    };
    let target_hr = Tensor::from_fn([1, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let encoder = FeatureEncoder::<f64>::default();
    let full = grad_check(weights.tensors(), 1e-6, 12, 14, |g, ids| {
        let net = weights.with_nodes(ids).map_err(graph_err)?;
        let out = net.forward(g, &input).map_err(graph_err)?;
        let t = g.constant(target_hr.clone());
        let nodes = sim_loss(g, out.output, t, &encoder, 0.5).map_err(|e| match e {
            evsr_core::loss::LossError::Graph(g) => g,
            other => panic!("{other}"),
        })?;
        Ok(nodes.total)
    })
    .unwrap();
    let elapsed = started.elapsed();
    Outcome::gate(
        worst_op.0 < 1e-6 && full.max_rel_error < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "ops max rel err {:.2e} ({}), network + L_sim {:.2e} over {} coords, {:.1}s",
            worst_op.0,
            worst_op.1,
            full.max_rel_error,
            full.checked,
            elapsed.as_secs_f64()
        ),
    )
}

// ----------------------------------------------------------------- stacking

/// Last writer wins over the prefix ending at (and including) the first
/// event whose pixel count within the channel exceeds the cap.
fn reference_channel(events: &[Event], w: usize, h: usize, cap: u32) -> Vec<u8> {
    let mut counts = vec![0u32; w * h];
    let mut out = vec![128u8; w * h];
    for e in events {
        let i = e.y as usize * w + e.x as usize;
        out[i] = match e.polarity {
            Polarity::Positive => 255,
            Polarity::Negative => 0,
        };
        counts[i] += 1;
        if counts[i] > cap {
            break;
        }
    }
    out
}

fn random_stream(rng: &mut ChaCha8Rng) -> EventStream {
    let (w, h) = (rng.random_range(1..7u16), rng.random_range(1..6u16));
    let n = rng.random_range(1..900);
    // A hot pixel receives many duplicates so the cap is reached.
    let hot = (rng.random_range(0..w), rng.random_range(0..h));
    let hot_rate = rng.random_range(0.0..0.6);
    let mut t = rng.random_range(0.0..1.0);
    let events = (0..n)
        .map(|_| {
            if rng.random_bool(0.7) {
                t += rng.random_range(0.0..1e-3);
            }
            let (x, y) = if rng.random_bool(hot_rate) {
                hot
            } else {
                (rng.random_range(0..w), rng.random_range(0..h))
            };
            let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(t, x, y, p)
        })
        .collect();
    EventStream::new(w, h, events).unwrap()
}

fn stacking_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut streams, mut capped, mut sequences) = (0, 0, 0);
    for _ in 0..1000 {
        let s = random_stream(&mut rng);
        let (w, h) = (s.width() as usize, s.height() as usize);
        let c = rng.random_range(1..4);
        let n_e = rng.random_range(1..=s.len().div_ceil(c).max(1));
        let cfg = StackConfig::new(n_e, c).unwrap();
        let m = cfg.events_per_stack();
        if s.len() < m {
            continue;
        }
        streams += 1;
        let start = rng.random_range(0..=s.len() - m);
        let st = build_stack(&s, start, &cfg).unwrap();
        for k in 0..c {
            let evs = &s.events()[start + k * n_e..start + (k + 1) * n_e];
            let want = reference_channel(evs, w, h, cfg.override_cap);
            if st.channel(k) != &want[..] {
                return Outcome::gate(false, format!("stack mismatch on a {w}x{h} stream, n_e {n_e}, c {c}"));
            }
            let mut counts = vec![0u32; w * h];
            if evs.iter().any(|e| {
                let i = e.y as usize * w + e.x as usize;
                counts[i] += 1;
                counts[i] > cfg.override_cap
            }) {
                capped += 1;
            }
        }
        if !st.data().iter().all(|&v| v == 0 || v == 128 || v == 255) {
            return Outcome::gate(false, "value outside {0,128,255}".into());
        }

        // Overlapped sequences around a random anchor.
        let half = rng.random_range(0..4);
        let overlap = rng.random_range(0..m);
        let anchor = s.events()[rng.random_range(0..s.len())].t;
        if let Ok(seq) = build_sequence(&s, anchor, &cfg, 2 * half + 1, overlap) {
            sequences += 1;
            for pair in seq.stacks.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let shared = (a.last_index + 1).saturating_sub(b.first_index);
                if shared != overlap || b.first_index - a.first_index != m - overlap {
                    return Outcome::gate(false, format!("neighbors share {shared} events, expected {overlap}"));
                }
            }
            for st in &seq.stacks {
                if st != &build_stack(&s, st.first_index, &cfg).unwrap() {
                    return Outcome::gate(false, "sequence stack differs from build_stack".into());
                }
            }
        }
    }
    Outcome::gate(
        streams >= 900 && capped > 0 && sequences > 0,
        format!("{streams} streams match the reference ({capped} capped channels), {sequences} overlapped sequences share exactly L"),
    )
}

// ---------------------------------------------------------------- simulator

fn simulator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut segments, mut events, mut worst_count, mut worst_t) = (0usize, 0usize, 0i64, 0.0f64);
    for trial in 0..200 {
        // The floor(|delta| / theta) count is exact to one event when the
        // leftover from the previous segment is below one threshold of the
        // current direction: equal thresholds, or ramps that never reverse.
        // Even trials use equal thresholds with reversals, odd trials unequal
        // thresholds on monotone ramps (direction drawn per pixel).
        let symmetric = trial % 2 == 0;
        let tp = rng.random_range(0.1..0.5);
        let tn = if symmetric { tp } else { rng.random_range(0.1..0.5) };
        let theta = ThresholdModel::new(tp, tn).unwrap();
        let (w, h) = (3usize, 2usize);
        let n = rng.random_range(2..10);
        let dt = 1e-3;
        let dirs: Vec<f64> = (0..w * h).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        // Per-pixel piecewise-linear log-intensity ramps.
        let mut samples = vec![(0..w * h).map(|_| rng.random_range(-3.0..0.0)).collect::<Vec<f64>>()];
        for _ in 1..n {
            let last = samples.last().unwrap().clone();
            samples.push(
                last.iter()
                    .zip(&dirs)
                    .map(|(v, d)| if symmetric { v + rng.random_range(-1.5..1.5) } else { v + d * rng.random_range(0.0..1.5) })
                    .collect(),
            );
        }
        let mut g = EventGenerator::from_log(w as u16, h as u16, 0.0, &samples[0], theta).unwrap();
        for (k, l) in samples.iter().enumerate().skip(1) {
            g.push_log(k as f64 * dt, l).unwrap();
        }
        let stream = g.finish().unwrap();
        for p in 0..w * h {
            let got: Vec<&Event> = stream
                .events()
                .iter()
                .filter(|e| e.y as usize * w + e.x as usize == p)
                .collect();
            // Analytic crossings: the reference level moves by one threshold
            // per event; each crossing time solves a linear equation.
            let mut reference = samples[0][p];
            let mut want = Vec::new();
            for k in 1..n {
                let (a, b) = (samples[k - 1][p], samples[k][p]);
                let t0 = (k - 1) as f64 * dt;
                let before = want.len();
                loop {
                    let (level, sign) = if b > a && b - reference >= theta.theta_pos - 1e-12 {
                        (reference + theta.theta_pos, 1)
                    } else if b < a && reference - b >= theta.theta_neg - 1e-12 {
                        (reference - theta.theta_neg, -1)
                    } else {
                        break;
                    };
                    reference = level;
                    want.push((t0 + (level - a) / (b - a) * dt, sign));
                }
                let th = if b > a { theta.theta_pos } else { theta.theta_neg };
                let floor = ((b - a).abs() / th).floor() as i64;
                worst_count = worst_count.max((((want.len() - before) as i64) - floor).abs());
                segments += 1;
            }
            if got.len() != want.len() {
                return Outcome::gate(false, format!("pixel {p}: {} events, oracle {}", got.len(), want.len()));
            }
            for (e, (t, sign)) in got.iter().zip(&want) {
                if e.polarity.sign() != *sign {
                    return Outcome::gate(false, "polarity mismatch".into());
                }
                worst_t = worst_t.max((e.t - t).abs());
            }
            events += got.len();
        }
    }

    // The simulator's LR frame is the HR render integrated over each LR
    // pixel, for every texture family. Field-of-view alignment is checked by
    // point-sampling the LR intrinsics directly on a smooth texture, where
    // aliasing cannot mask a shift; sharp textures are logged.
    let (mut worst_mad, mut sharp_mad, mut pair_exact) = (0.0f64, 0.0f64, true);
    for k in 0..30 {
        let kind = [TextureKind::Blobs, TextureKind::Shapes, TextureKind::Checker][k % 3];
        let tex = procedural_texture(kind, 160, 160, &mut rng);
        let cams = CameraPair {
            lr_width: 32,
            lr_height: 32,
            scale: 2,
            focal_lr: 32.0,
        };
        let pose = Pose {
            center: [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), -64.0],
            rotation: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.3..0.3)],
        };
        let (lr_frame, hr) = render_pair(&tex, &pose, &cams).unwrap();
        let down = hr.box_downsample(2).unwrap();
        pair_exact &= lr_frame == down;
        let lr = render_frame(&tex, &pose, &cams.lr()).unwrap();
        let mad = lr.data().iter().zip(down.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 1024.0;
        if kind == TextureKind::Blobs {
            worst_mad = worst_mad.max(mad);
        } else {
            sharp_mad = sharp_mad.max(mad);
        }
    }
    Outcome::gate(
        worst_count <= 1 && worst_t <= 1e-9 && pair_exact && worst_mad < 2.0 / 255.0,
        format!(
            "{events} events over {segments} ramp segments: count dev <= {worst_count}, max |dt| {worst_t:.1e}s; \
             LR frame == downsampled HR: {pair_exact}; point-sampled LR vs downsampled HR mad {:.3}/255 \
             (sharp textures {:.3}/255, aliasing)",
            worst_mad * 255.0,
            sharp_mad * 255.0
        ),
    )
}

// ---------------------------------------------------------------------- loss

/// Straight-line feature distance: stride-2 3x3 convs with PReLU, channel
/// unit-normalization, channel scaling, squared norm, spatial mean, layer sum.
fn reference_lpips(a: &Tensor<f64>, b: &Tensor<f64>, enc: &FeatureEncoder<f64>) -> f64 {
    type Planes = Vec<Vec<Vec<f64>>>;
    fn layer(x: &Planes, w: &Tensor<f64>, bias: &Tensor<f64>) -> Planes {
        let [co, ci, _, _] = w.shape();
        let (h, wd) = (x[0].len(), x[0][0].len());
        let (oh, ow) = ((h - 1) / 2 + 1, (wd - 1) / 2 + 1);
        let mut out = vec![vec![vec![0.0; ow]; oh]; co];
        for (o, plane) in out.iter_mut().enumerate() {
            for (y, row) in plane.iter_mut().enumerate() {
                for (xx, v) in row.iter_mut().enumerate() {
                    let mut s = bias.at([0, o, 0, 0]);
                    for (c, xc) in x.iter().enumerate().take(ci) {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * y + ky) as isize - 1;
                                let ix = (2 * xx + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.at([o, c, ky, kx]) * xc[iy as usize][ix as usize];
                                }
                            }
                        }
                    }
                    *v = if s >= 0.0 { s } else { ENCODER_SLOPE * s };
                }
            }
        }
        out
    }
    let planes = |t: &Tensor<f64>| {
        let [_, _, h, w] = t.shape();
        vec![(0..h).map(|y| (0..w).map(|x| t.at([0, 0, y, x])).collect()).collect::<Vec<Vec<f64>>>()]
    };
    let (mut fa, mut fb) = (planes(a), planes(b));
    let mut total = 0.0;
    for l in 0..ENCODER_WIDTHS.len() {
        fa = layer(&fa, &enc.weights()[l], &enc.biases()[l]);
        fb = layer(&fb, &enc.weights()[l], &enc.biases()[l]);
        let (h, w) = (fa[0].len(), fa[0][0].len());
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let na = fa.iter().map(|c| c[y][x] * c[y][x]).sum::<f64>().sqrt() + NORM_EPS;
                let nb = fb.iter().map(|c| c[y][x] * c[y][x]).sum::<f64>().sqrt() + NORM_EPS;
                for c in 0..fa.len() {
                    let d = enc.scales()[l][c] * (fa[c][y][x] / na - fb[c][y][x] / nb);
                    sum += d * d;
                }
            }
        }
        total += sum / (h * w) as f64;
    }
    total
}

fn loss_equivalence() -> Outcome {
    let enc = FeatureEncoder::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let image = |h, w, rng: &mut ChaCha8Rng| Tensor::from_fn([1, 1, h, w], |_| rng.random_range(0.0..1.0));
    let mut worst = 0.0f64;
    let mut identical_zero = true;
    let mut lambda_zero = true;
    for k in 0..100 {
        let (h, w) = [(16, 16), (24, 32), (17, 21)][k % 3];
        let (a, b) = (image(h, w, &mut rng), image(h, w, &mut rng));
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = lpips_loss(&mut g, x, y, &enc).unwrap();
        worst = worst.max((g.value(l).item() - reference_lpips(&a, &b, &enc)).abs());
        let same = lpips_loss(&mut g, x, x, &enc).unwrap();
        identical_zero &= g.value(same).item() == 0.0;

        // sim_loss with lambda = 0 is the L1 loss, value and gradient.
        let mut g1 = Graph::new();
        let (p, t) = (g1.parameter(a.clone()), g1.constant(b.clone()));
        let sim = sim_loss(&mut g1, p, t, &enc, 0.0).unwrap().total;
        let grad_sim = g1.backward(sim).unwrap().get(p).unwrap().clone();
        let mut g2 = Graph::new();
        let (p2, t2) = (g2.parameter(a), g2.constant(b));
        let l1 = l1_loss(&mut g2, p2, t2).unwrap();
        let grad_l1 = g2.backward(l1).unwrap().get(p2).unwrap().clone();
        lambda_zero &= g1.value(sim).item() == g2.value(l1).item() && grad_sim == grad_l1;
    }
    Outcome::gate(
        worst < 1e-10 && identical_zero && lambda_zero,
        format!("max |lpips - straight-line| {worst:.1e} on 100 pairs; lpips(X,X) = 0: {identical_zero}; sim_loss(lambda=0) == l1: {lambda_zero}"),
    )
}

// ------------------------------------------------------------------- metrics

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let img = |rng: &mut ChaCha8Rng| GrayImage::from_fn(24, 20, |_, _| rng.random_range(0.0..1.0));
    let mut ok = true;
    for _ in 0..50 {
        let (x, y) = (img(&mut rng), img(&mut rng));
        let m = mse(&x, &y).unwrap();
        ok &= psnr(&x, &y, 1.0).unwrap() == 10.0 * (1.0 / m).log10();
        ok &= ssim(&x, &x).unwrap() == 1.0;
        let zero = FlowField::zeros(24, 20);
        let full = Mask::filled(24, 20, true);
        let e = warp_error(&x, &x, &zero, &full).unwrap();
        ok &= e.value == 0.0 && !e.degenerate;
        let flow = FlowField::from_fn(24, 20, |_, _| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
        let mask = Mask::from_fn(24, 20, |_, _| rng.random_bool(0.6));
        let base = warp_error(&x, &y, &flow, &mask).unwrap();
        let perturbed = GrayImage::from_fn(24, 20, |u, v| if mask.get(u, v) { x.get(u, v) } else { 7.0 });
        ok &= warp_error(&perturbed, &y, &flow, &mask).unwrap() == base;
    }
    Outcome::gate(
        ok,
        "psnr = 10 log10(1/mse) exactly, ssim(X,X) = 1, warp_error identity and masked invariance on 50 pairs".into(),
    )
}

// ------------------------------------------------------------ toy training

fn toy_config(sequence_length: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 0x5EED;
    cfg.threads = 1;
    cfg.data.sequences = 64;
    cfg.data.lr_width = 32;
    cfg.data.lr_height = 32;
    cfg.data.scale = 2;
    cfg.data.texture = TextureFamily::Checker;
    // Planar motion: translation and roll only.
    cfg.data.max_tilt = 0.0;
    cfg.data.max_zoom = 0.0;
    cfg.stack.events_per_channel = 200;
    cfg.stack.channels = 3;
    cfg.model.sequence_length = sequence_length;
    cfg.train.epochs = 20;
    cfg.train.lr0 = 2e-3;
    cfg
}

struct ToyRun {
    psnr: f64,
    psnr_zero_flow: f64,
    baseline: f64,
    first_loss: f64,
    last_loss: f64,
    elapsed: Duration,
    encoder_unchanged: bool,
}

fn toy_run(root: &Path, sequence_length: usize) -> ToyRun {
    let cfg = toy_config(sequence_length);
    if !root.join("manifest.json").exists() {
        generate_dataset(&cfg, root).unwrap();
    }
    let ds = load_dataset(root, 1).unwrap();
    let spec = sample_spec(&cfg, sequence_length, true).unwrap();
    let sets = split_samples(&ds, &spec, cfg.train.validation_fraction, 1).unwrap();
    let mean = mean_image(&sets.train.iter().map(|s| &s.target).collect::<Vec<_>>());
    let baseline = constant_baseline(&mean, &sets.val).unwrap().psnr;
    let opts = TrainOptions {
        arch: cfg.arch().unwrap(),
        train: cfg.train.clone(),
        normalize: spec.stack.normalize,
        seed: cfg.seed,
        threads: 1,
        out: None,
        verbose: false,
    };
    let encoder_before = FeatureEncoder::<f32>::default().checksum();
    let started = Instant::now();
    let out = train(&sets.train, &sets.val, &opts).unwrap();
    let elapsed = started.elapsed();
    let eval = |zero| evaluate(&out.weights, &sets.val, spec.stack.normalize, zero, 1).unwrap().report.psnr;
    let epochs = &out.log.epochs;
    ToyRun {
        psnr: eval(false),
        psnr_zero_flow: eval(true),
        baseline,
        first_loss: epochs[0].mean_loss,
        last_loss: epochs[epochs.len() - 1].mean_loss,
        elapsed,
        encoder_unchanged: FeatureEncoder::<f32>::default().checksum() == encoder_before,
    }
}

// --------------------------------------------------------------- round trips

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn smoke_in(dir: &Path) -> evsr::Result<evsr::cli::SmokeReport> {
    let mut cfg = RunConfig::default();
    smoke(
        &mut cfg,
        SmokeArgs {
            out: Some(dir.to_path_buf()),
            textures: None,
        },
    )
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let (fa, fb) = (files(a), files(b));
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let checkpoints = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "e2sr")).count();
    let images = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "png")).count();

    let ckpt = a.join("run").join("model.e2sr");
    let weights = load_weights(&ckpt).unwrap();
    let resaved = a.join("resaved.e2sr");
    save_weights(&resaved, &weights).unwrap();
    let save_load_save = std::fs::read(&resaved).unwrap() == std::fs::read(&ckpt).unwrap();
    Outcome::gate(
        differing.is_empty() && fa.len() == fb.len() && checkpoints > 0 && images > 0 && save_load_save,
        format!(
            "two seeded smoke runs: {} files compared ({checkpoints} checkpoints, {images} images), differing: {:?}; save-load-save identical: {save_load_save}",
            fa.len(),
            differing
        ),
    )
}

fn round_trips(smoke_dir: &Path, smoke_time: Option<Duration>) -> Outcome {
    // Simulated events files reparse and reserialize byte for byte.
    let data = smoke_dir.join("data");
    let mut events_ok = true;
    let mut n_files = 0;
    for entry in std::fs::read_dir(&data).unwrap() {
        let path = entry.unwrap().path().join(EVENTS_FILE);
        if !path.exists() {
            continue;
        }
        n_files += 1;
        let bytes = std::fs::read(&path).unwrap();
        let stream = read_events(&path, None).unwrap();
        let mut text = String::new();
        write_event_text(&stream, &mut text).unwrap();
        events_ok &= text.as_bytes() == bytes;
        let again = parse_event_text(text.as_bytes(), stream.width(), stream.height()).unwrap();
        events_ok &= again == stream;
    }
    let weights = ModelWeights::<f32>::init(ArchConfig::toy(3, 2, 3), 9).unwrap();
    let bytes = encode_weights(&weights);
    let ckpt_ok = encode_weights(&evsr::checkpoint::decode_weights(&bytes).unwrap()) == bytes;
    let fast = smoke_time.is_some_and(|t| t < Duration::from_secs(300));
    Outcome::gate(
        n_files > 0 && events_ok && ckpt_ok && fast,
        format!(
            "{n_files} events files round-trip: {events_ok}; checkpoint round-trip: {ckpt_ok}; smoke {}",
            smoke_time.map_or("failed".into(), |t| format!("{:.1}s", t.as_secs_f64()))
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    // Written to the raw stderr handle so the report shows without
    // `--nocapture`.
    let mut record = |id: &'static str, name: &'static str, o: Outcome| {
        let _ = writeln!(
            std::io::stderr(),
            "[{}] {id:>3} {name}: {}{}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            if o.gating { "" } else { " (soft, not gating)" }
        );
        results.push((id, name, o));
    };

    record("2", "gradient fidelity", gradient_fidelity());
    record("3", "stacking oracle", stacking_oracle());
    record("4", "simulator oracle", simulator_oracle());

    let data = work.path().join("toy");
    let s3 = toy_run(&data, 3);
    let ratio = s3.last_loss / s3.first_loss;
    record(
        "5a",
        "toy loss halves",
        Outcome::gate(
            ratio <= 0.5 && s3.elapsed < Duration::from_secs(1800) && s3.encoder_unchanged,
            format!(
                "final/first epoch L_sim {:.4}/{:.4} = {ratio:.3}; trained in {:.0}s single-threaded; loss encoder unchanged: {}",
                s3.last_loss,
                s3.first_loss,
                s3.elapsed.as_secs_f64(),
                s3.encoder_unchanged
            ),
        ),
    );
    record(
        "5b",
        "toy PSNR over mean image",
        Outcome::gate(
            s3.psnr >= s3.baseline + 2.0,
            format!(
                "test PSNR {:.3} dB vs mean-image {:.3} dB (+{:.3})",
                s3.psnr,
                s3.baseline,
                s3.psnr - s3.baseline
            ),
        ),
    );
    let s7 = toy_run(&data, 7);
    record(
        "5c",
        "7S vs 3S",
        Outcome {
            pass: s7.psnr >= s3.psnr - 0.5,
            gating: false,
            detail: format!("7S {:.3} dB vs 3S {:.3} dB ({:+.3})", s7.psnr, s3.psnr, s7.psnr - s3.psnr),
        },
    );

    record("6", "loss formula equivalence", loss_equivalence());
    record("7", "metric identities", metric_identities());

    let (smoke_a, smoke_b) = (work.path().join("smoke_a"), work.path().join("smoke_b"));
    let first = smoke_in(&smoke_a);
    let smoke_time = first.as_ref().ok().map(|r| r.elapsed);
    let second = smoke_in(&smoke_b);
    record(
        "8",
        "determinism",
        match (&first, &second) {
            (Ok(_), Ok(_)) => determinism(&smoke_a, &smoke_b),
            _ => Outcome::gate(false, format!("smoke failed: {:?} / {:?}", first.err(), second.err())),
        },
    );

    let gap = s3.psnr - s3.psnr_zero_flow;
    record(
        "9",
        "flow ablation direction",
        Outcome::gate(
            gap >= 0.0,
            format!(
                "estimated flow {:.3} dB, zeroed flow {:.3} dB, gap {gap:+.3} dB (strictly positive: {})",
                s3.psnr,
                s3.psnr_zero_flow,
                gap > 0.0
            ),
        ),
    );
    record("10", "round trips and smoke", round_trips(&smoke_a, smoke_time));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, o)| o.gating && !o.pass)
        .map(|(id, name, _)| format!("{id} {name}"))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
