//! Run configuration: TOML file values, then command-line overrides. The
//! effective configuration is echoed into every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use evsr_core::network::ArchConfig;
use evsr_core::simulator::{CameraPair, MotionConfig, SequenceConfig, TextureKind};
use evsr_core::stacking::{NormalizeMode, StackConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::io::{write_bytes, BitDepth};

/// Name of the echoed configuration.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-sample work. Results do not depend on it.
    pub threads: usize,
    pub deterministic: bool,
    pub data: DataConfig,
    pub stack: StackSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            deterministic: false,
            data: DataConfig::default(),
            stack: StackSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Shapes,
    Checker,
    Blobs,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Shapes => "shapes",
            TextureFamily::Checker => "checker",
            TextureFamily::Blobs => "blobs",
        }
    }
}

impl From<TextureFamily> for TextureKind {
    fn from(t: TextureFamily) -> Self {
        match t {
            TextureFamily::Shapes => TextureKind::Shapes,
            TextureFamily::Checker => TextureKind::Checker,
            TextureFamily::Blobs => TextureKind::Blobs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Pgm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Pgm => "pgm",
        }
    }
}

/// Dataset synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: usize,
    pub lr_width: usize,
    pub lr_height: usize,
    pub scale: usize,
    /// LR focal length in pixels; the LR width when unset.
    pub focal: Option<f64>,
    /// Directory of texture images; procedural textures when unset.
    pub textures: Option<PathBuf>,
    pub texture: TextureFamily,
    /// Side of the procedural texture or of the crop taken from an image.
    pub texture_size: usize,
    pub theta_range: (f64, f64),
    /// Log-intensity sampling rate in Hz.
    pub fs: f64,
    /// Ground-truth frames per sequence.
    pub anchors: usize,
    /// Longest stack sequence the anchors must leave room for.
    pub max_sequence_length: usize,
    pub duration: f64,
    pub segments: usize,
    pub distance: f64,
    pub max_shift: f64,
    pub max_zoom: f64,
    pub max_tilt: f64,
    pub max_roll: f64,
    pub attempts: usize,
    pub image_format: ImageFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        let seq = SequenceConfig::default();
        let m = seq.motion;
        Self {
            sequences: 64,
            lr_width: seq.cameras.lr_width,
            lr_height: seq.cameras.lr_height,
            scale: seq.cameras.scale,
            focal: None,
            textures: None,
            texture: TextureFamily::Shapes,
            texture_size: seq.texture_size,
            theta_range: seq.theta_range,
            fs: seq.fs,
            anchors: 2,
            max_sequence_length: 7,
            duration: m.duration,
            segments: m.segments,
            distance: m.distance,
            max_shift: m.max_shift,
            max_zoom: m.max_zoom,
            max_tilt: m.max_tilt,
            max_roll: m.max_roll,
            attempts: seq.attempts,
            image_format: ImageFormat::Png,
        }
    }
}

impl DataConfig {
    /// Simulator settings with margins for `max_sequence_length` stacks.
    pub fn sequence_config(&self, stack: &StackSection) -> Result<SequenceConfig> {
        if self.sequences == 0 || self.anchors == 0 {
            return Err(Error::Config("sequences and anchors must be positive".into()));
        }
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.lr_width == 0 || self.lr_height == 0 {
            return Err(Error::Config("LR size must be positive".into()));
        }
        let (lo, hi) = self.theta_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid threshold range ({lo}, {hi})")));
        }
        let sc = stack.stack_config()?;
        if self.max_sequence_length % 2 == 0 {
            return Err(Error::Config("max_sequence_length must be odd".into()));
        }
        if stack.overlap >= sc.events_per_stack() {
            return Err(Error::Config("overlap must be below the events per stack".into()));
        }
        Ok(SequenceConfig {
            cameras: CameraPair {
                lr_width: self.lr_width,
                lr_height: self.lr_height,
                scale: self.scale,
                focal_lr: self.focal.unwrap_or(self.lr_width as f64),
            },
            motion: MotionConfig {
                duration: self.duration,
                segments: self.segments,
                distance: self.distance,
                max_shift: self.max_shift,
                max_zoom: self.max_zoom,
                max_tilt: self.max_tilt,
                max_roll: self.max_roll,
            },
            texture: self.texture.into(),
            texture_size: self.texture_size,
            theta_range: self.theta_range,
            fs: self.fs,
            anchors: self.anchors,
            margin_before: 0,
            margin_after: 0,
            attempts: self.attempts,
        }
        .with_stack_margins(sc.events_per_stack(), self.max_sequence_length, stack.overlap))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    Signed,
    Raw8,
}

impl From<Normalize> for NormalizeMode {
    fn from(n: Normalize) -> Self {
        match n {
            Normalize::Signed => NormalizeMode::Signed,
            Normalize::Raw8 => NormalizeMode::Raw8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackSection {
    pub events_per_channel: usize,
    pub channels: usize,
    pub override_cap: u32,
    /// Events shared by consecutive stacks.
    pub overlap: usize,
    pub normalize: Normalize,
}

impl Default for StackSection {
    fn default() -> Self {
        Self {
            events_per_channel: 200,
            channels: 3,
            override_cap: StackConfig::default().override_cap,
            overlap: 0,
            normalize: Normalize::Signed,
        }
    }
}

impl StackSection {
    pub fn stack_config(&self) -> Result<StackConfig> {
        let mut cfg = StackConfig::new(self.events_per_channel, self.channels)?.with_override_cap(self.override_cap);
        cfg.normalize = self.normalize.into();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub sequence_length: usize,
    pub filters: Option<usize>,
    pub efr_filters: Option<usize>,
    pub c_blocks: Option<usize>,
    pub a_blocks: Option<usize>,
    pub b_blocks: Option<usize>,
    pub d_blocks: Option<usize>,
    pub mixer_filters: Option<usize>,
    /// Estimate flow between stacks; zero flow otherwise.
    pub use_flow: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Toy,
            sequence_length: 3,
            filters: None,
            efr_filters: None,
            c_blocks: None,
            a_blocks: None,
            b_blocks: None,
            d_blocks: None,
            mixer_filters: None,
            use_flow: true,
        }
    }
}

impl ModelSection {
    pub fn arch(&self, channels: usize, scale: usize) -> Result<ArchConfig> {
        let mut a = match self.preset {
            Preset::Toy => ArchConfig::toy(channels, scale, self.sequence_length),
            Preset::Desk => ArchConfig::desk(channels, scale, self.sequence_length),
        };
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut a.filters, self.filters);
        set(&mut a.efr_filters, self.efr_filters);
        set(&mut a.c_blocks, self.c_blocks);
        set(&mut a.a_blocks, self.a_blocks);
        set(&mut a.b_blocks, self.b_blocks);
        set(&mut a.d_blocks, self.d_blocks);
        set(&mut a.mixer_filters, self.mixer_filters);
        a.validate()?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda: f64,
    pub clip_norm: f64,
    pub validation_fraction: f64,
    /// Images written by `infer`.
    pub bit_depth: BitDepth,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr0: 0.01,
            lambda: evsr_core::loss::DEFAULT_LAMBDA,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            bit_depth: BitDepth::Eight,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lambda >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("lr0 and clip_norm must be positive, lambda non-negative".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Defaults, overlaid by the TOML file when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join(ECHO_FILE), self.to_toml().as_bytes())
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        self.model.arch(self.stack.channels, self.data.scale)
    }
}
