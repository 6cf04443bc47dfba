//! Raw event records and validated event streams.
//!
//! On disk an event is one line `t x y p` with `t` in seconds and `p` in
//! `{0, 1}`; in memory the polarity is a signed [`Polarity`].

use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use thiserror::Error;

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// `+1` or `-1`.
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// On-disk encoding: 1 for positive, 0 for negative.
    pub fn bit(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Polarity::Positive),
            0 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EventError {
    #[error("line {line}: malformed event record: {reason}")]
    Parse { line: usize, reason: &'static str },
    #[error("line {line}: event ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: u64,
        y: u64,
        width: u16,
        height: u16,
    },
    #[error("line {line}: timestamp {t} precedes previous timestamp {previous}")]
    Ordering { line: usize, t: f64, previous: f64 },
    #[error("event source is not valid UTF-8")]
    Encoding,
    #[error("slice [{start}, {start}+{count}) exceeds stream of {len} events")]
    Range {
        start: usize,
        count: usize,
        len: usize,
    },
    #[error("invalid sensor size {width}x{height}")]
    SensorSize { width: u16, height: u16 },
}

/// Sorted, in-bounds event list for a `width x height` sensor.
///
/// Every constructor validates bounds and timestamp monotonicity, so any
/// stream reachable through the API is sorted by `t` (ties keep input order).
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    /// Validates `events`; errors report 1-based positions as line numbers.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self, EventError> {
        if width == 0 || height == 0 {
            return Err(EventError::SensorSize { width, height });
        }
        let mut previous = f64::NEG_INFINITY;
        for (i, ev) in events.iter().enumerate() {
            check_event(ev, i + 1, width, height, previous)?;
            previous = ev.t;
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Contiguous window of exactly `count` events starting at `start`.
    pub fn slice_by_count(&self, start: usize, count: usize) -> Result<EventSlice<'_>, EventError> {
        let end = start.checked_add(count).filter(|&e| e <= self.events.len());
        match end {
            Some(end) => Ok(EventSlice {
                stream: self,
                range: start..end,
            }),
            None => Err(EventError::Range {
                start,
                count,
                len: self.events.len(),
            }),
        }
    }

    /// Index of the first event with `t >= time`, or `len()` if none.
    pub fn first_at_or_after(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t < time)
    }

    /// `(first t, last t)` or `None` when empty.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

/// Borrowed contiguous window into an [`EventStream`].
#[derive(Debug, Clone)]
pub struct EventSlice<'a> {
    stream: &'a EventStream,
    range: Range<usize>,
}

impl<'a> EventSlice<'a> {
    pub fn events(&self) -> &'a [Event] {
        &self.stream.events[self.range.clone()]
    }

    /// Position of the window in the source stream.
    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn to_stream(&self) -> EventStream {
        EventStream {
            width: self.stream.width,
            height: self.stream.height,
            events: self.events().to_vec(),
        }
    }
}

fn check_event(ev: &Event, line: usize, width: u16, height: u16, previous: f64) -> Result<(), EventError> {
    if !ev.t.is_finite() || ev.t < 0.0 {
        return Err(EventError::Parse {
            line,
            reason: "timestamp must be a finite non-negative number",
        });
    }
    if ev.x >= width || ev.y >= height {
        return Err(EventError::OutOfBounds {
            line,
            x: ev.x as u64,
            y: ev.y as u64,
            width,
            height,
        });
    }
    if ev.t < previous {
        return Err(EventError::Ordering {
            line,
            t: ev.t,
            previous,
        });
    }
    Ok(())
}

/// Parses `t x y p` lines. Blank lines are skipped; line numbers in errors
/// are 1-based and count blank lines.
pub fn parse_event_text(source: &[u8], width: u16, height: u16) -> Result<EventStream, EventError> {
    if width == 0 || height == 0 {
        return Err(EventError::SensorSize { width, height });
    }
    let text = core::str::from_utf8(source).map_err(|_| EventError::Encoding)?;
    let mut events = Vec::new();
    let mut previous = f64::NEG_INFINITY;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (Some(t), Some(x), Some(y), Some(p)) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(EventError::Parse {
                line,
                reason: "expected four fields `t x y p`",
            });
        };
        if fields.next().is_some() {
            return Err(EventError::Parse {
                line,
                reason: "trailing fields after `t x y p`",
            });
        }
        let t: f64 = t.parse().map_err(|_| EventError::Parse {
            line,
            reason: "timestamp is not a decimal number",
        })?;
        let x: u64 = x.parse().map_err(|_| EventError::Parse {
            line,
            reason: "x is not a non-negative integer",
        })?;
        let y: u64 = y.parse().map_err(|_| EventError::Parse {
            line,
            reason: "y is not a non-negative integer",
        })?;
        let polarity = p
            .parse::<u8>()
            .ok()
            .and_then(Polarity::from_bit)
            .ok_or(EventError::Parse {
                line,
                reason: "polarity must be 0 or 1",
            })?;
        if x >= width as u64 || y >= height as u64 {
            return Err(EventError::OutOfBounds {
                line,
                x,
                y,
                width,
                height,
            });
        }
        let ev = Event::new(t, x as u16, y as u16, polarity);
        check_event(&ev, line, width, height, previous)?;
        previous = t;
        events.push(ev);
    }
    Ok(EventStream {
        width,
        height,
        events,
    })
}

/// Writes one newline-terminated `t x y p` line per event, `t` with nine
/// decimals.
pub fn write_event_text<W: fmt::Write>(stream: &EventStream, sink: &mut W) -> fmt::Result {
    for ev in &stream.events {
        writeln!(sink, "{:.9} {} {} {}", ev.t, ev.x, ev.y, ev.polarity.bit())?;
    }
    Ok(())
}
