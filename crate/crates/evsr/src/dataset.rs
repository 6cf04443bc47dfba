//! On-disk simulated datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/seq_0000/events.txt      t x y p at LR
//! <root>/seq_0000/sensor.json     LR sensor size
//! <root>/seq_0000/metadata.json   seed, thresholds, trajectory, frames
//! <root>/seq_0000/hr_000.png      ground truth at each anchor
//! <root>/seq_0000/lr_000.png
//! ```
//!
//! Sequence `i` draws from a ChaCha8 stream keyed by `(seed, i)`, so the
//! output is independent of thread count and generation order.

use std::fs;
use std::path::{Path, PathBuf};

use evsr_core::events::EventStream;
use evsr_core::image::GrayImage;
use evsr_core::simulator::{procedural_texture, simulate_with_texture, Pose, SequenceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig, StackSection};
use crate::error::{Error, IoContext, Result};
use crate::io::{read_events, read_image, read_json, write_events, write_image, write_json, BitDepth, SensorSize};
use crate::par::map_indexed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.json";
pub const EVENTS_FILE: &str = "events.txt";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub sequences: Vec<String>,
    pub data: DataConfig,
    /// Stacking the anchor margins were sized for.
    pub stack: StackSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyPose {
    pub t: f64,
    pub center: [f64; 3],
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub hr: String,
    pub lr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub index: usize,
    pub seed: u64,
    pub sensor: SensorSize,
    pub scale: usize,
    /// `procedural:<family>` or the source image file name.
    pub texture: String,
    pub theta_pos: f64,
    pub theta_neg: f64,
    pub trajectory: Vec<KeyPose>,
    pub events: usize,
    pub frames: Vec<FrameRecord>,
}

pub fn sequence_name(index: usize) -> String {
    format!("seq_{index:04}")
}

/// RNG of sequence `index` under the master `seed`.
pub fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Texture image files in `dir`, sorted by name.
pub fn list_textures(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("textures directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoTextures(dir.into()));
    }
    Ok(files)
}

/// Random square crop of side `min(size, w, h)`.
fn crop(img: &GrayImage, size: usize, rng: &mut impl Rng) -> GrayImage {
    let side = size.min(img.width()).min(img.height());
    let x0 = rng.random_range(0..=img.width() - side);
    let y0 = rng.random_range(0..=img.height() - side);
    GrayImage::from_fn(side, side, |x, y| img.get(x0 + x, y0 + y))
}

fn generate_one(
    index: usize,
    seed: u64,
    data: &DataConfig,
    seq_cfg: &SequenceConfig,
    textures: &[(String, GrayImage)],
    root: &Path,
) -> Result<String> {
    let mut rng = sequence_rng(seed, index);
    let (texture_name, texture) = if textures.is_empty() {
        let name = format!("procedural:{}", data.texture.name());
        (name, procedural_texture(seq_cfg.texture, seq_cfg.texture_size, seq_cfg.texture_size, &mut rng))
    } else {
        let k = rng.random_range(0..textures.len());
        (textures[k].0.clone(), crop(&textures[k].1, data.texture_size, &mut rng))
    };
    let sim = simulate_with_texture(seq_cfg, texture, &mut rng)?;
    let name = sequence_name(index);
    let dir = root.join(&name);
    write_events(&dir.join(EVENTS_FILE), &sim.events)?;
    let ext = data.image_format.extension();
    let mut frames = Vec::with_capacity(sim.anchors.len());
    for (k, &t) in sim.anchors.iter().enumerate() {
        let hr = format!("hr_{k:03}.{ext}");
        let lr = format!("lr_{k:03}.{ext}");
        write_image(&dir.join(&hr), &sim.hr_frames[k], BitDepth::Eight)?;
        write_image(&dir.join(&lr), &sim.lr_frames[k], BitDepth::Eight)?;
        frames.push(FrameRecord { t, hr, lr });
    }
    let meta = SequenceMeta {
        index,
        seed,
        sensor: SensorSize {
            width: sim.events.width(),
            height: sim.events.height(),
        },
        scale: seq_cfg.cameras.scale,
        texture: texture_name,
        theta_pos: sim.thresholds.theta_pos,
        theta_neg: sim.thresholds.theta_neg,
        trajectory: sim
            .trajectory
            .keys()
            .iter()
            .map(|(t, p)| KeyPose {
                t: *t,
                center: p.center,
                rotation: p.rotation,
            })
            .collect(),
        events: sim.events.len(),
        frames,
    };
    write_json(&dir.join(METADATA_FILE), &meta)?;
    Ok(name)
}

/// Simulates `cfg.data.sequences` sequences into `root`.
pub fn generate_dataset(cfg: &RunConfig, root: &Path) -> Result<DatasetManifest> {
    let seq_cfg = cfg.data.sequence_config(&cfg.stack)?;
    if seq_cfg.cameras.lr_width > u16::MAX as usize || seq_cfg.cameras.lr_height > u16::MAX as usize {
        return Err(Error::Config("LR size exceeds the sensor coordinate range".into()));
    }
    let textures = match &cfg.data.textures {
        Some(dir) => list_textures(dir)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, read_image(&p)?))
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    fs::create_dir_all(root).at(root)?;
    let names = map_indexed(cfg.data.sequences, cfg.threads, |i| {
        generate_one(i, cfg.seed, &cfg.data, &seq_cfg, &textures, root)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        seed: cfg.seed,
        sequences: names,
        data: cfg.data.clone(),
        stack: cfg.stack.clone(),
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// One sequence loaded back from disk.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub name: String,
    pub meta: SequenceMeta,
    pub events: EventStream,
    pub hr: Vec<GrayImage>,
    pub lr: Vec<GrayImage>,
}

impl SequenceData {
    pub fn anchors(&self) -> Vec<f64> {
        self.meta.frames.iter().map(|f| f.t).collect()
    }

    pub fn trajectory_poses(&self) -> Vec<(f64, Pose)> {
        self.meta
            .trajectory
            .iter()
            .map(|k| {
                (
                    k.t,
                    Pose {
                        center: k.center,
                        rotation: k.rotation,
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub sequences: Vec<SequenceData>,
}

pub fn load_sequence(root: &Path, name: &str) -> Result<SequenceData> {
    let dir = root.join(name);
    let meta: SequenceMeta = read_json(&dir.join(METADATA_FILE))?;
    let events = read_events(&dir.join(EVENTS_FILE), Some(meta.sensor))?;
    let mut hr = Vec::with_capacity(meta.frames.len());
    let mut lr = Vec::with_capacity(meta.frames.len());
    for f in &meta.frames {
        hr.push(read_image(&dir.join(&f.hr))?);
        lr.push(read_image(&dir.join(&f.lr))?);
    }
    Ok(SequenceData {
        name: name.to_string(),
        meta,
        events,
        hr,
        lr,
    })
}

pub fn load_dataset(root: &Path, threads: usize) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format {
            path: root.join(MANIFEST_FILE),
            reason: format!("unsupported dataset version {}", manifest.version),
        });
    }
    if manifest.sequences.is_empty() {
        return Err(Error::Config(format!("dataset {} has no sequences", root.display())));
    }
    let sequences = map_indexed(manifest.sequences.len(), threads, |i| {
        load_sequence(root, &manifest.sequences[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.into(),
        manifest,
        sequences,
    })
}

/// FNV-1a of a sequence name.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Training and validation indices. The `round(n * fraction)` names with
/// the smallest hashes (at least one, and never all) form the validation set.
pub fn split(names: &[String], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = names.len();
    if n < 2 {
        return ((0..n).collect(), Vec::new());
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (name_hash(&names[i]), i));
    let mut val: Vec<usize> = order[..k].to_vec();
    val.sort_unstable();
    let train = (0..n).filter(|i| !val.contains(i)).collect();
    (train, val)
}
