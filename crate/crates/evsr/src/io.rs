//! Event text files, grayscale images and `.flo` flow dumps.

use std::fs;
use std::path::{Path, PathBuf};

use evsr_core::events::{parse_event_text, write_event_text, EventStream};
use evsr_core::flow::FlowField;
use evsr_core::image::GrayImage;
use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Sidecar holding the sensor size next to an events file.
pub const SENSOR_FILE: &str = "sensor.json";
/// `.flo` header tag.
pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u16,
    pub height: u16,
}

impl std::str::FromStr for SensorSize {
    type Err = String;

    /// Parses `WxH`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<u16>().map_err(|e| format!("`{v}`: {e}"));
        let size = SensorSize {
            width: parse(w)?,
            height: parse(h)?,
        };
        if size.width == 0 || size.height == 0 {
            return Err(format!("sensor size must be positive, got `{s}`"));
        }
        Ok(size)
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).at(path)?;
    serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn sidecar(events: &Path) -> PathBuf {
    events.with_file_name(SENSOR_FILE)
}

/// Reads `t x y p` lines. Without an explicit size the sensor sidecar in the
/// same directory is consulted.
pub fn read_events(path: &Path, sensor: Option<SensorSize>) -> Result<EventStream> {
    let sensor = match sensor {
        Some(s) => s,
        None => {
            let side = sidecar(path);
            if !side.exists() {
                return Err(Error::Config(format!(
                    "sensor size unknown for {}: pass --sensor-size WxH or provide {}",
                    path.display(),
                    side.display()
                )));
            }
            read_json(&side)?
        }
    };
    let bytes = fs::read(path).at(path)?;
    parse_event_text(&bytes, sensor.width, sensor.height).map_err(|source| Error::Events {
        path: path.into(),
        source,
    })
}

/// Writes the events file and its sensor sidecar.
pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let mut text = String::with_capacity(stream.len() * 24);
    write_event_text(stream, &mut text).expect("writing to a String");
    write_bytes(path, text.as_bytes())?;
    write_json(
        &sidecar(path),
        &SensorSize {
            width: stream.width(),
            height: stream.height(),
        },
    )
}

/// Output sample depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

/// Grayscale image in `[0, 1]`; the format follows the extension (`.png`,
/// `.pgm`). Color inputs are converted to luma.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        other if other.color().bytes_per_pixel() > other.color().channel_count() => {
            other.to_luma16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        }
        other => other.to_luma8().into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    };
    Ok(GrayImage::from_vec(w, h, data).expect("decoded dims"))
}

/// Writes values clamped to `[0, 1]`, rounded to the requested depth.
pub fn write_image(path: &Path, img: &GrayImage, depth: BitDepth) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = match depth {
        BitDepth::Eight => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.to_u8())
            .expect("buffer size")
            .save(path),
        BitDepth::Sixteen => {
            let raw = img
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, raw)
                .expect("buffer size")
                .save(path)
        }
    };
    res.map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Raw 8-bit grayscale plane.
pub fn write_u8_plane(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, pixels.to_vec())
        .expect("buffer size")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

/// `.flo` bytes: magic, width, height, interleaved `(dx, dy)` as `f32` LE.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    for &v in flow.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField, String> {
    let word = |i: usize| -> Result<[u8; 4], String> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| "truncated".to_string())
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err("bad magic".into());
    }
    let w = u32::from_le_bytes(word(1)?) as usize;
    let h = u32::from_le_bytes(word(2)?) as usize;
    if bytes.len() != 12 + w * h * 8 {
        return Err(format!("expected {} bytes for {w}x{h}, got {}", 12 + w * h * 8, bytes.len()));
    }
    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = 3 + 2 * (y * w + x);
            let dx = f32::from_le_bytes(word(i)?) as f64;
            let dy = f32::from_le_bytes(word(i + 1)?) as f64;
            flow.set(x, y, (dx, dy));
        }
    }
    Ok(flow)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).at(path)?;
    decode_flo(&bytes).map_err(|reason| Error::Format {
        path: path.into(),
        reason,
    })
}
