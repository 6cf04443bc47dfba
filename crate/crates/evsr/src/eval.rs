//! Test-set metrics of a trained model.

use std::fmt::Write as _;
use std::path::Path;

use evsr_core::flow::{estimate_flow, occlusion_mask, FlowConfig};
use evsr_core::image::GrayImage;
use evsr_core::metrics::{warp_error, FrameMetrics, MetricReport};
use evsr_core::network::{infer, InferenceMode, ModelWeights};
use evsr_core::stacking::NormalizeMode;

use crate::error::Result;
use crate::io::write_bytes;
use crate::par::map_indexed;
use crate::samples::PreparedSample;

/// Outputs and metrics over a sample set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub outputs: Vec<GrayImage>,
    pub report: MetricReport,
}

/// Runs the network on every sample; `zero_flow` drops the estimated flow.
pub fn predict(
    weights: &ModelWeights<f32>,
    samples: &[PreparedSample],
    mode: NormalizeMode,
    zero_flow: bool,
    threads: usize,
) -> Result<Vec<GrayImage>> {
    map_indexed(samples.len(), threads, |i| {
        let s = &samples[i];
        let input = if zero_flow {
            s.sample.input.without_flow()
        } else {
            s.sample.input.clone()
        };
        Ok(infer(weights, &input, &InferenceMode::Main, mode)?.output)
    })
    .into_iter()
    .collect()
}

/// Per-frame PSNR/SSIM/MSE against the HR ground truth. Consecutive frames
/// of one sequence also get the warping error, with flow and occlusion mask
/// computed on the ground-truth pair.
pub fn score(outputs: &[GrayImage], samples: &[PreparedSample], threads: usize) -> Result<MetricReport> {
    let flow_cfg = FlowConfig::default();
    let frames = map_indexed(samples.len(), threads, |i| {
        let s = &samples[i];
        let mut m = FrameMetrics::compute(&outputs[i], &s.target)?;
        if let Some(n) = samples.get(i + 1).filter(|n| n.sequence == s.sequence) {
            let fwd = estimate_flow(&s.target, &n.target, &flow_cfg)?;
            let bwd = estimate_flow(&n.target, &s.target, &flow_cfg)?;
            let mask = occlusion_mask(&fwd, &bwd)?;
            let e = warp_error(&outputs[i], &outputs[i + 1], &fwd, &mask)?;
            m.e_warp = (!e.degenerate).then_some(e.value);
        }
        Ok(m)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_frames(frames))
}

pub fn evaluate(
    weights: &ModelWeights<f32>,
    samples: &[PreparedSample],
    mode: NormalizeMode,
    zero_flow: bool,
    threads: usize,
) -> Result<Evaluation> {
    let outputs = predict(weights, samples, mode, zero_flow, threads)?;
    let report = score(&outputs, samples, threads)?;
    Ok(Evaluation { outputs, report })
}

/// Pixelwise mean of the given frames.
pub fn mean_image(frames: &[&GrayImage]) -> GrayImage {
    let (w, h) = frames[0].dims();
    let mut acc = vec![0.0; w * h];
    for f in frames {
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let n = frames.len() as f64;
    GrayImage::from_vec(w, h, acc.into_iter().map(|v| v / n).collect()).expect("dims")
}

/// Metrics of predicting `mean` for every sample.
pub fn constant_baseline(mean: &GrayImage, samples: &[PreparedSample]) -> Result<MetricReport> {
    let outputs = vec![mean.clone(); samples.len()];
    score(&outputs, samples, 1)
}

/// `frame_idx,psnr,ssim,mse,e_warp` rows and a final `mean` row; a missing
/// warping error is left empty.
pub fn report_csv(report: &MetricReport) -> String {
    let mut out = String::from("frame_idx,psnr,ssim,mse,e_warp\n");
    let warp = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
    for (i, f) in report.frames.iter().enumerate() {
        writeln!(out, "{i},{:.6},{:.6},{:.9},{}", f.psnr, f.ssim, f.mse, warp(f.e_warp)).expect("string");
    }
    writeln!(
        out,
        "mean,{:.6},{:.6},{:.9},{}",
        report.psnr,
        report.ssim,
        report.mse,
        warp(report.e_warp)
    )
    .expect("string");
    out
}

pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    write_bytes(path, report_csv(report).as_bytes())
}
