use evsr_core::flow::{FlowField, Mask};
use evsr_core::image::GrayImage;
use evsr_core::metrics::{mse, psnr, ssim, warp_error, FrameMetrics, MetricError, MetricReport, PSNR_CAP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
}

/// Direct 2-D weighted statistics per window position.
fn reference_ssim(a: &GrayImage, b: &GrayImage) -> f64 {
    let r = 5isize;
    let mut weights = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = a.dims();
    let mut acc = 0.0;
    let mut n = 0;
    for cy in r..h as isize - r {
        for cx in r..w as isize - r {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = weights[i][j] / total;
                    let x = (cx - r + j as isize) as usize;
                    let y = (cy - r + i as isize) as usize;
                    let (p, q) = (a.get(x, y), b.get(x, y));
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn psnr_and_mse_cases() {
    let zero = GrayImage::filled(8, 8, 0.0);
    let one = GrayImage::filled(8, 8, 1.0);
    assert_eq!(psnr(&zero, &zero, 1.0).unwrap(), PSNR_CAP);
    assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
    let a = GrayImage::filled(8, 8, 0.3);
    let b = GrayImage::filled(8, 8, 0.4);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert!(matches!(
        mse(&a, &GrayImage::filled(8, 7, 0.0)),
        Err(MetricError::DimensionMismatch { .. })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = (random(9, 7, &mut rng), random(9, 7, &mut rng));
    let mut naive = 0.0;
    for r in 0..7 {
        for c in 0..9 {
            naive += (x.get(c, r) - y.get(c, r)).powi(2);
        }
    }
    naive /= 63.0;
    assert!((mse(&x, &y).unwrap() - naive).abs() < 1e-15);
}

#[test]
fn psnr_mse_tie_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (x, y) = (random(12, 12, &mut rng), random(12, 12, &mut rng));
        let m = mse(&x, &y).unwrap();
        assert_eq!(psnr(&x, &y, 1.0).unwrap(), 10.0 * (1.0 / m).log10());
    }
}

#[test]
fn ssim_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (x, y) = (random(24, 17, &mut rng), random(24, 17, &mut rng));
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let s = ssim(&x, &y).unwrap();
        assert!((s - reference_ssim(&x, &y)).abs() < 1e-8);
        assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&x, &x.map(|v| 1.0 - v)).unwrap() < 1.0);
    }
    let tiny = GrayImage::filled(10, 20, 0.5);
    assert!(matches!(ssim(&tiny, &tiny), Err(MetricError::TooSmall(_))));
}

#[test]
fn warp_error_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random(10, 8, &mut rng);
    let zero = FlowField::zeros(10, 8);
    let full = Mask::filled(10, 8, true);
    let e = warp_error(&f, &f, &zero, &full).unwrap();
    assert_eq!((e.value, e.degenerate), (0.0, false));

    let none = Mask::filled(10, 8, false);
    let e = warp_error(&f, &random(10, 8, &mut rng), &zero, &none).unwrap();
    assert_eq!((e.value, e.degenerate), (0.0, true));

    let a = GrayImage::filled(10, 8, 0.2);
    let b = GrayImage::filled(10, 8, 0.5);
    let e = warp_error(&a, &b, &zero, &full).unwrap();
    assert!((e.value - 0.09).abs() < 1e-15);
}

#[test]
fn warp_error_ignores_masked_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random(12, 12, &mut rng), random(12, 12, &mut rng));
    let flow = FlowField::from_fn(12, 12, |x, y| (0.3 * (x % 3) as f64, -0.2 * (y % 2) as f64));
    let mask = Mask::from_fn(12, 12, |x, y| (x + 2 * y) % 3 != 0);
    let base = warp_error(&a, &b, &flow, &mask).unwrap();
    let perturbed = GrayImage::from_fn(12, 12, |x, y| if mask.get(x, y) { a.get(x, y) } else { 5.0 });
    assert_eq!(warp_error(&perturbed, &b, &flow, &mask).unwrap(), base);
}

#[test]
fn report_means() {
    let frames = vec![
        FrameMetrics {
            psnr: 20.0,
            ssim: 0.5,
            mse: 0.01,
            e_warp: Some(0.2),
        },
        FrameMetrics {
            psnr: 30.0,
            ssim: 0.7,
            mse: 0.001,
            e_warp: None,
        },
    ];
    let r = MetricReport::from_frames(frames);
    assert_eq!(r.psnr, 25.0);
    assert!((r.ssim - 0.6).abs() < 1e-15);
    assert_eq!(r.e_warp, Some(0.2));
    let ident = GrayImage::filled(16, 16, 0.4);
    let m = FrameMetrics::compute(&ident, &ident).unwrap();
    assert_eq!((m.psnr, m.ssim, m.mse), (PSNR_CAP, 1.0, 0.0));
}
