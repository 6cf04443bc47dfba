use evsr_core::flow::{estimate_flow, estimate_stack_flow, warp_image, FlowConfig, FlowError, FlowModel};
use evsr_core::image::GrayImage;
use evsr_core::simulator::{procedural_texture, TextureKind};
use evsr_core::stacking::EventStack;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn texture(seed: u64) -> GrayImage {
    procedural_texture(TextureKind::Blobs, 64, 64, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `b(x, y) = a(x - dx, y - dy)`, edge clamped.
fn shifted(a: &GrayImage, dx: isize, dy: isize) -> GrayImage {
    GrayImage::from_fn(a.width(), a.height(), |x, y| a.get_clamped(x as isize - dx, y as isize - dy))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn interior(flow: &evsr_core::flow::FlowField, margin: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for y in margin..flow.height() - margin {
        for x in margin..flow.width() - margin {
            let (dx, dy) = flow.get(x, y);
            xs.push(dx);
            ys.push(dy);
        }
    }
    (xs, ys)
}

#[test]
fn identical_inputs_give_zero_flow() {
    let a = texture(1);
    let f = estimate_flow(&a, &a, &FlowConfig::default()).unwrap();
    assert!(f.max_magnitude() < 0.05);
}

#[test]
fn three_pixel_shift_recovered() {
    let a = texture(2);
    let b = shifted(&a, 3, 0);
    let f = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
    let (xs, ys) = interior(&f, 8);
    let mdx = median(xs);
    assert!((2.5..=3.5).contains(&mdx), "median dx {mdx}");
    assert!(median(ys).abs() < 0.5);
}

#[test]
fn shift_equivariance() {
    let a = texture(3);
    for (dx, dy) in [(1, 0), (0, 2), (-2, 1), (3, -3)] {
        let f = estimate_flow(&a, &shifted(&a, dx, dy), &FlowConfig::default()).unwrap();
        let (xs, ys) = interior(&f, 10);
        assert!((median(xs) - dx as f64).abs() < 0.5, "{dx},{dy}");
        assert!((median(ys) - dy as f64).abs() < 0.5, "{dx},{dy}");
    }
}

#[test]
fn estimated_flow_warps_b_onto_a() {
    let a = texture(4);
    let b = shifted(&a, 2, 1);
    let f = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
    let (warped, valid) = warp_image(&b, &f).unwrap();
    let mut err = 0.0;
    let mut n = 0;
    for y in 8..56 {
        for x in 8..56 {
            if valid.get(x, y) {
                err += (warped.get(x, y) - a.get(x, y)).abs();
                n += 1;
            }
        }
    }
    assert!(err / (n as f64) < 0.01);
}

#[test]
fn flat_stacks_give_zero_flow() {
    let s = EventStack::neutral(16, 16, 3);
    let f = estimate_stack_flow(&s, &s, &FlowConfig::default()).unwrap();
    assert!(f.is_finite());
    assert_eq!(f.max_magnitude(), 0.0);
}

#[test]
fn dimension_errors() {
    let a = GrayImage::filled(16, 16, 0.5);
    let b = GrayImage::filled(16, 12, 0.5);
    assert!(matches!(
        estimate_flow(&a, &b, &FlowConfig::default()),
        Err(FlowError::DimensionMismatch { .. })
    ));
    let s = GrayImage::filled(6, 6, 0.5);
    assert!(matches!(estimate_flow(&s, &s, &FlowConfig::default()), Err(FlowError::TooSmall(_))));
}

fn smooth(x: f64, y: f64) -> f64 {
    0.5 + 0.15 * (0.31 * x).sin() + 0.15 * (0.23 * y).cos() + 0.1 * (0.17 * (x - y)).sin()
}

#[test]
fn affine_model_identical_and_flat_inputs_give_zero() {
    let a = texture(5);
    let cfg = FlowConfig { model: FlowModel::Affine, ..FlowConfig::default() };
    assert!(estimate_flow(&a, &a, &cfg).unwrap().max_magnitude() < 1e-6);
    let s = EventStack::neutral(16, 16, 3);
    assert_eq!(estimate_stack_flow(&s, &s, &FlowConfig::stacks()).unwrap().max_magnitude(), 0.0);
}

#[test]
fn affine_model_recovers_affine_motion() {
    // f(p) = A (p - c) + t, b(p + f(p)) = a(p).
    let (w, h) = (40usize, 40usize);
    let c = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let m = [[1.02, 0.01], [-0.015, 0.99]];
    let t = (0.6, -0.4);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let a = GrayImage::from_fn(w, h, |x, y| smooth(x as f64, y as f64));
    let b = GrayImage::from_fn(w, h, |x, y| {
        let (qx, qy) = (x as f64 - c.0 - t.0, y as f64 - c.1 - t.1);
        let u = (m[1][1] * qx - m[0][1] * qy) / det;
        let v = (-m[1][0] * qx + m[0][0] * qy) / det;
        smooth(u + c.0, v + c.1)
    });
    for cfg in [FlowConfig::stacks(), FlowConfig { model: FlowModel::Affine, ..FlowConfig::default() }] {
        let f = estimate_flow(&a, &b, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - c.0, y as f64 - c.1);
                let gt = ((m[0][0] - 1.0) * u + m[0][1] * v + t.0, m[1][0] * u + (m[1][1] - 1.0) * v + t.1);
                let (dx, dy) = f.get(x, y);
                worst = worst.max(((dx - gt.0).powi(2) + (dy - gt.1).powi(2)).sqrt());
            }
        }
        assert!(worst < 0.05, "levels {}: worst error {worst}", cfg.levels);
    }
}
