//! Network-ready samples built from loaded sequences.

use evsr_core::flow::FlowConfig;
use evsr_core::image::GrayImage;
use evsr_core::network::prepare_sequence;
use evsr_core::stacking::{build_sequence, StackConfig};
use evsr_core::train::TrainSample;

use crate::dataset::SequenceData;
use crate::error::Result;
use crate::par::map_indexed;

/// How stacks are cut and paired with flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub stack: StackConfig,
    pub overlap: usize,
    pub sequence_length: usize,
    /// Flow estimation settings; zero flow when `None`.
    pub flow: Option<FlowConfig>,
}

/// One anchor of one sequence.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// Index into the sequence list the sample was built from.
    pub sequence: usize,
    pub frame: usize,
    pub sample: TrainSample<f32>,
    pub target: GrayImage,
    pub lr: GrayImage,
}

/// Every anchor of every sequence in order.
pub fn prepare_samples(seqs: &[&SequenceData], spec: &SampleSpec, threads: usize) -> Result<Vec<PreparedSample>> {
    let jobs: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(s, q)| (0..q.meta.frames.len()).map(move |f| (s, f)))
        .collect();
    map_indexed(jobs.len(), threads, |j| {
        let (s, f) = jobs[j];
        let seq = seqs[s];
        let stacks = build_sequence(
            &seq.events,
            seq.meta.frames[f].t,
            &spec.stack,
            spec.sequence_length,
            spec.overlap,
        )?;
        let input = prepare_sequence(&stacks, spec.stack.normalize, spec.flow.as_ref())?;
        Ok(PreparedSample {
            sequence: s,
            frame: f,
            sample: TrainSample {
                input,
                target: seq.hr[f].to_tensor(),
            },
            target: seq.hr[f].clone(),
            lr: seq.lr[f].clone(),
        })
    })
    .into_iter()
    .collect()
}
