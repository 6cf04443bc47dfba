//! Stacking based on the number of events.
//!
//! A stack has `c` channels; channel `k` rasterizes `N_e` consecutive events
//! onto a neutral (128) canvas, writing 255 for positive and 0 for negative
//! events, later events overwriting earlier ones. A stack therefore consumes
//! `M = c * N_e` events.
//!
//! A per-pixel write counter guards against hot spots: once a pixel in a
//! channel has been written more than `override_cap` times, that channel
//! stops filling and the rest of its events are skipped.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autograd::{Scalar, Tensor};
use crate::events::{EventStream, Polarity};
use crate::image::GrayImage;

pub const NEUTRAL: u8 = 128;
pub const POSITIVE: u8 = 255;
pub const NEGATIVE: u8 = 0;

/// How 8-bit stack values become network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizeMode {
    /// `v / 255`.
    Raw8,
    /// `(v - 128) / 128`: 0 → -1, 128 → 0, 255 → 0.9921875.
    #[default]
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub events_per_channel: usize,
    pub channels: usize,
    pub override_cap: u32,
    pub normalize: NormalizeMode,
}

impl Default for StackConfig {
    /// 3 channels of 1,000 events.
    fn default() -> Self {
        Self {
            events_per_channel: 1000,
            channels: 3,
            override_cap: 50,
            normalize: NormalizeMode::Signed,
        }
    }
}

impl StackConfig {
    pub fn new(events_per_channel: usize, channels: usize) -> Result<Self, StackError> {
        let cfg = Self {
            events_per_channel,
            channels,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_override_cap(mut self, cap: u32) -> Self {
        self.override_cap = cap;
        self
    }

    /// Events per stack.
    pub fn events_per_stack(&self) -> usize {
        self.channels * self.events_per_channel
    }

    pub fn validate(&self) -> Result<(), StackError> {
        if self.events_per_channel == 0 || self.channels == 0 || self.override_cap == 0 {
            return Err(StackError::Config);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StackError {
    #[error("stack needs {needed} events from index {start}, stream has {available}")]
    ShortStream {
        start: isize,
        needed: usize,
        available: usize,
    },
    #[error("anchor time {anchor} outside stream time range")]
    AnchorOutOfRange { anchor: f64 },
    #[error("sequence length must be odd and positive, got {0}")]
    SequenceLength(usize),
    #[error("overlap {overlap} must be smaller than the stack size {stack}")]
    Overlap { overlap: usize, stack: usize },
    #[error("events_per_channel, channels and override_cap must be positive")]
    Config,
}

/// `c x h x w` raster of 8-bit values, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStack {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
    pub t_start: f64,
    pub t_end: f64,
    /// Index of the first event of the window in the source stream.
    pub first_index: usize,
    /// Index of the last event of the window (inclusive).
    pub last_index: usize,
}

impl EventStack {
    /// All-neutral stack, used as a placeholder and in tests.
    pub fn neutral(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![NEUTRAL; width * height * channels],
            t_start: 0.0,
            t_end: 0.0,
            first_index: 0,
            last_index: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `[1, c, h, w]` network input.
    pub fn to_network_input<T: Scalar>(&self, mode: NormalizeMode) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| match mode {
                NormalizeMode::Raw8 => T::lit(v as f64 / 255.0),
                NormalizeMode::Signed => T::lit((v as f64 - 128.0) / 128.0),
            })
            .collect();
        Tensor::from_vec([1, self.channels, self.height, self.width], data).expect("stack dims")
    }

    /// Channel-averaged image in `[0, 1]`, the representation used for flow.
    pub fn mean_image(&self) -> GrayImage {
        let plane = self.width * self.height;
        let norm = 1.0 / (255.0 * self.channels as f64);
        let mut out = vec![0.0; plane];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                *o += v as f64;
            }
        }
        for o in &mut out {
            *o *= norm;
        }
        GrayImage::from_vec(self.width, self.height, out).expect("stack dims")
    }
}

/// Rasterizes events `[start, start + M)` into a stack.
pub fn build_stack(stream: &EventStream, start: usize, cfg: &StackConfig) -> Result<EventStack, StackError> {
    cfg.validate()?;
    let m = cfg.events_per_stack();
    let available = stream.len().saturating_sub(start);
    if available < m {
        return Err(StackError::ShortStream {
            start: start as isize,
            needed: m,
            available,
        });
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let events = &stream.events()[start..start + m];
    let mut stack = EventStack::neutral(w, h, cfg.channels);
    let mut writes = vec![0u32; w * h];
    for (c, chunk) in events.chunks_exact(cfg.events_per_channel).enumerate() {
        writes.fill(0);
        for ev in chunk {
            let (x, y) = (ev.x as usize, ev.y as usize);
            let value = match ev.polarity {
                Polarity::Positive => POSITIVE,
                Polarity::Negative => NEGATIVE,
            };
            stack.set(c, x, y, value);
            let count = &mut writes[y * w + x];
            *count += 1;
            if *count > cfg.override_cap {
                break;
            }
        }
    }
    stack.first_index = start;
    stack.last_index = start + m - 1;
    stack.t_start = events[0].t;
    stack.t_end = events[m - 1].t;
    Ok(stack)
}

/// Odd-length window of stacks around an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct StackSequence {
    pub stacks: Vec<EventStack>,
    /// Events shared by consecutive stacks.
    pub overlap: usize,
}

impl StackSequence {
    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    pub fn central_index(&self) -> usize {
        self.stacks.len() / 2
    }

    pub fn central(&self) -> &EventStack {
        &self.stacks[self.central_index()]
    }
}

/// Start index of the central stack for `anchor`: the stack ends at the
/// first event with `t >= anchor`.
fn central_start(stream: &EventStream, anchor: f64, m: usize) -> Result<isize, StackError> {
    let Some((t0, t1)) = stream.time_range() else {
        return Err(StackError::AnchorOutOfRange { anchor });
    };
    if !(anchor >= t0 && anchor <= t1) {
        return Err(StackError::AnchorOutOfRange { anchor });
    }
    let end = stream.first_at_or_after(anchor);
    Ok(end as isize + 1 - m as isize)
}

/// Builds `length` stacks of `M` events; consecutive stacks start `M - overlap`
/// events apart and the central one covers `anchor`.
pub fn build_sequence(
    stream: &EventStream,
    anchor: f64,
    cfg: &StackConfig,
    length: usize,
    overlap: usize,
) -> Result<StackSequence, StackError> {
    let stacks = sequence_starts(stream, anchor, cfg, length, overlap)?
        .into_iter()
        .map(|start| build_stack(stream, start, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StackSequence { stacks, overlap })
}

/// Start indices of the stacks `build_sequence` would produce, without
/// rasterizing. Useful for checking anchors cheaply.
pub fn sequence_starts(
    stream: &EventStream,
    anchor: f64,
    cfg: &StackConfig,
    length: usize,
    overlap: usize,
) -> Result<Vec<usize>, StackError> {
    cfg.validate()?;
    if length == 0 || length % 2 == 0 {
        return Err(StackError::SequenceLength(length));
    }
    let m = cfg.events_per_stack();
    if overlap >= m {
        return Err(StackError::Overlap { overlap, stack: m });
    }
    let step = (m - overlap) as isize;
    let center = central_start(stream, anchor, m)?;
    let half = (length / 2) as isize;
    let first = center - half * step;
    let last_end = center + half * step + m as isize;
    if first < 0 || last_end > stream.len() as isize {
        return Err(StackError::ShortStream {
            start: first,
            needed: (last_end - first) as usize,
            available: stream.len(),
        });
    }
    Ok((-half..=half).map(|k| (center + k * step) as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;

    fn stream(events: Vec<(u16, u16, Polarity)>, w: u16, h: u16) -> EventStream {
        let evs = events
            .into_iter()
            .enumerate()
            .map(|(i, (x, y, p))| Event::new(i as f64 * 1e-3, x, y, p))
            .collect();
        EventStream::new(w, h, evs).unwrap()
    }

    #[test]
    fn distinct_pixels_fill_their_channels() {
        let evs = (0..9).map(|i| (i as u16, 0, Polarity::Positive)).collect();
        let s = stream(evs, 9, 1);
        let st = build_stack(&s, 0, &StackConfig::new(3, 3).unwrap()).unwrap();
        for c in 0..3 {
            let lit: Vec<usize> = (0..9).filter(|&x| st.get(c, x, 0) != NEUTRAL).collect();
            assert_eq!(lit, [3 * c, 3 * c + 1, 3 * c + 2]);
        }
    }

    #[test]
    fn repeated_pixel_only_that_pixel_set() {
        let evs = (0..12).map(|_| (2, 1, Polarity::Positive)).collect();
        let s = stream(evs, 4, 3);
        let st = build_stack(&s, 0, &StackConfig::new(4, 3).unwrap()).unwrap();
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let expect = if (x, y) == (2, 1) { POSITIVE } else { NEUTRAL };
                    assert_eq!(st.get(c, x, y), expect);
                }
            }
        }
    }

    #[test]
    fn override_cap_stops_channel() {
        // 52 alternating events at (0,0) then 8 events elsewhere, same channel.
        let mut evs: Vec<_> = (0..52)
            .map(|i| (0, 0, if i % 2 == 0 { Polarity::Positive } else { Polarity::Negative }))
            .collect();
        evs.extend((1..9).map(|x| (x, 0, Polarity::Positive)));
        let s = stream(evs, 10, 1);
        let cfg = StackConfig::new(60, 1).unwrap();
        let st = build_stack(&s, 0, &cfg).unwrap();
        // 51st write is event index 50 (positive); 52nd never happens.
        assert_eq!(st.get(0, 0, 0), POSITIVE);
        assert!((1..10).all(|x| st.get(0, x, 0) == NEUTRAL));
        assert_eq!(st.last_index, 59);
    }

    #[test]
    fn short_stream_reports_available() {
        let s = stream(vec![(0, 0, Polarity::Positive); 5], 2, 2);
        let err = build_stack(&s, 2, &StackConfig::new(2, 2).unwrap()).unwrap_err();
        assert_eq!(
            err,
            StackError::ShortStream {
                start: 2,
                needed: 4,
                available: 3
            }
        );
    }

    #[test]
    fn network_input_mapping() {
        let mut st = EventStack::neutral(3, 1, 1);
        let t: Tensor<f64> = st.to_network_input(NormalizeMode::Signed);
        assert!(t.data().iter().all(|&v| v == 0.0));
        st.set(0, 0, 0, POSITIVE);
        st.set(0, 2, 0, NEGATIVE);
        let t: Tensor<f64> = st.to_network_input(NormalizeMode::Signed);
        assert_eq!(t.data(), &[0.9921875, 0.0, -1.0]);
        let r: Tensor<f64> = st.to_network_input(NormalizeMode::Raw8);
        assert_eq!(r.data()[0], 1.0);
        assert_eq!(r.data()[2], 0.0);
    }

    #[test]
    fn sequence_layouts() {
        let evs = (0..40).map(|i| ((i % 5) as u16, 0, Polarity::Positive)).collect();
        let s = stream(evs, 5, 1);
        let cfg = StackConfig::new(2, 2).unwrap(); // M = 4
        let anchor = s.events()[20].t;

        let seq = build_sequence(&s, anchor, &cfg, 3, 0).unwrap();
        let starts: Vec<usize> = seq.stacks.iter().map(|st| st.first_index).collect();
        assert_eq!(starts, [13, 17, 21]);
        assert!(seq.central().t_start <= anchor && anchor <= seq.central().t_end);

        let seq = build_sequence(&s, anchor, &cfg, 3, 3).unwrap();
        let starts: Vec<usize> = seq.stacks.iter().map(|st| st.first_index).collect();
        assert_eq!(starts, [16, 17, 18]);

        assert!(matches!(
            build_sequence(&s, s.events()[0].t, &cfg, 3, 0),
            Err(StackError::ShortStream { .. })
        ));
        assert!(matches!(
            build_sequence(&s, 100.0, &cfg, 3, 0),
            Err(StackError::AnchorOutOfRange { .. })
        ));
        assert!(matches!(build_sequence(&s, anchor, &cfg, 4, 0), Err(StackError::SequenceLength(4))));
        assert!(matches!(build_sequence(&s, anchor, &cfg, 3, 4), Err(StackError::Overlap { .. })));
    }
}
