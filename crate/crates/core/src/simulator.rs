//! Planar-scene event simulator.
//!
//! A textured plane lies at `Z = 0` in world space, measured in texels, with
//! the texture centered on the origin. A pinhole camera with center `C`
//! (`C_z < 0`) and rotation `R` (camera to world, `R = Rz * Ry * Rx`) looks
//! toward `+Z`; the identity pose views the texture fronto-parallel. The LR and
//! HR cameras share the pose and principal point convention, and the HR focal
//! length is the LR one times the scale factor, so both see the same field of
//! view.
//!
//! Events come from per-pixel log intensity `log(I + eps)` sampled at a fixed
//! rate: each full threshold crossing between two samples emits one event
//! with a linearly interpolated timestamp, and the pixel's reference level
//! advances by the crossed amount.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

use crate::events::{Event, EventError, EventStream, Polarity};
use crate::image::GrayImage;

/// Value of pixels whose ray misses the texture.
pub const OUTSIDE: f64 = 0.5;
pub const LOG_EPS: f64 = 1e-3;
/// Slack for floating-point error when counting threshold crossings.
const CROSSING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("camera center z = {0} does not lie in front of the plane")]
    DegeneratePose(f64),
    #[error("sampling rate must be positive, got {0}")]
    SampleRate(f64),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory times must be strictly increasing")]
    TrajectoryOrder,
    #[error("thresholds must be positive")]
    Threshold,
    #[error("frame has {got} pixels, generator expects {expected}")]
    FrameSize { expected: usize, got: usize },
    #[error("sample time {t} is not after {last}")]
    SampleOrder { t: f64, last: f64 },
    #[error("only {got} events after {attempts} attempts, need {needed}")]
    TooFewEvents { got: usize, needed: usize, attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Events(#[from] EventError),
}

/// Pinhole intrinsics with square pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Principal point at the image center `((w-1)/2, (h-1)/2)`.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            width,
            height,
            focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }
}

/// Co-located LR and HR cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPair {
    pub lr_width: usize,
    pub lr_height: usize,
    pub scale: usize,
    pub focal_lr: f64,
}

impl CameraPair {
    pub fn lr(&self) -> Intrinsics {
        Intrinsics::centered(self.lr_width, self.lr_height, self.focal_lr)
    }

    pub fn hr(&self) -> Intrinsics {
        Intrinsics::centered(
            self.lr_width * self.scale,
            self.lr_height * self.scale,
            self.focal_lr * self.scale as f64,
        )
    }
}

/// Camera center and rotation angles (radians) about x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub center: [f64; 3],
    pub rotation: [f64; 3],
}

impl Pose {
    /// Fronto-parallel pose at distance `d` above the texture center.
    pub fn fronto(d: f64) -> Self {
        Self {
            center: [0.0, 0.0, -d],
            rotation: [0.0; 3],
        }
    }

    pub fn lerp(&self, other: &Pose, a: f64) -> Pose {
        let mut out = *self;
        for i in 0..3 {
            out.center[i] = self.center[i] + (other.center[i] - self.center[i]) * a;
            out.rotation[i] = self.rotation[i] + (other.rotation[i] - self.rotation[i]) * a;
        }
        out
    }

    /// Camera-to-world rotation, row-major.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (sx, cx) = Float::sin_cos(self.rotation[0]);
        let (sy, cy) = Float::sin_cos(self.rotation[1]);
        let (sz, cz) = Float::sin_cos(self.rotation[2]);
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&ry, &rx))
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Key poses with linear interpolation; clamps outside the key range.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    keys: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(keys: Vec<(f64, Pose)>) -> Result<Self, SimError> {
        if keys.is_empty() {
            return Err(SimError::EmptyTrajectory);
        }
        if keys.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(SimError::TrajectoryOrder);
        }
        if let Some((_, p)) = keys.iter().find(|(_, p)| !(p.center[2] < 0.0)) {
            return Err(SimError::DegeneratePose(p.center[2]));
        }
        Ok(Self { keys })
    }

    pub fn keys(&self) -> &[(f64, Pose)] {
        &self.keys
    }

    pub fn start(&self) -> f64 {
        self.keys[0].0
    }

    pub fn end(&self) -> f64 {
        self.keys[self.keys.len() - 1].0
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        let i = self.keys.partition_point(|(kt, _)| *kt <= t);
        if i == 0 {
            return self.keys[0].1;
        }
        if i == self.keys.len() {
            return self.keys[i - 1].1;
        }
        let (t0, p0) = self.keys[i - 1];
        let (t1, p1) = self.keys[i];
        p0.lerp(&p1, (t - t0) / (t1 - t0))
    }
}

/// Positive and negative log-intensity contrast thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdModel {
    pub theta_pos: f64,
    pub theta_neg: f64,
}

impl ThresholdModel {
    pub fn new(theta_pos: f64, theta_neg: f64) -> Result<Self, SimError> {
        if !(theta_pos > 0.0 && theta_neg > 0.0) {
            return Err(SimError::Threshold);
        }
        Ok(Self { theta_pos, theta_neg })
    }

    /// Independent uniform draws from `[lo, hi]`.
    pub fn sample(range: (f64, f64), rng: &mut impl Rng) -> Result<Self, SimError> {
        let (lo, hi) = range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SimError::Threshold);
        }
        let mut draw = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let theta_pos = draw();
        let theta_neg = draw();
        Self::new(theta_pos, theta_neg)
    }
}

/// Renders the textured plane seen from `pose`.
pub fn render_frame(texture: &GrayImage, pose: &Pose, intr: &Intrinsics) -> Result<GrayImage, SimError> {
    let cz = pose.center[2];
    if !(cz < 0.0) {
        return Err(SimError::DegeneratePose(cz));
    }
    let r = pose.matrix();
    let ox = (texture.width() as f64 - 1.0) / 2.0;
    let oy = (texture.height() as f64 - 1.0) / 2.0;
    Ok(GrayImage::from_fn(intr.width, intr.height, |u, v| {
        let dc = [
            (u as f64 - intr.cx) / intr.focal,
            (v as f64 - intr.cy) / intr.focal,
            1.0,
        ];
        let d = [
            r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2],
            r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2],
            r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2],
        ];
        if !(d[2] > 0.0) {
            return OUTSIDE;
        }
        let lambda = -cz / d[2];
        let x = pose.center[0] + lambda * d[0] + ox;
        let y = pose.center[1] + lambda * d[1] + oy;
        texture.sample_bilinear(x, y).unwrap_or(OUTSIDE)
    }))
}

/// LR frame integrated over each pixel's footprint: the HR render
/// box-downsampled by the scale factor.
pub fn render_pair(texture: &GrayImage, pose: &Pose, cams: &CameraPair) -> Result<(GrayImage, GrayImage), SimError> {
    let hr = render_frame(texture, pose, &cams.hr())?;
    let lr = hr.box_downsample(cams.scale).map_err(|_| SimError::Config("scale"))?;
    Ok((lr, hr))
}

pub fn log_intensity(i: f64) -> f64 {
    Float::ln(i.max(0.0) + LOG_EPS)
}

/// Incremental per-pixel threshold-crossing event generator.
#[derive(Debug, Clone)]
pub struct EventGenerator {
    width: u16,
    height: u16,
    thresholds: ThresholdModel,
    reference: Vec<f64>,
    last: Vec<f64>,
    last_t: f64,
    events: Vec<Event>,
}

impl EventGenerator {
    /// Starts from a log-intensity frame at time `t0`.
    pub fn from_log(width: u16, height: u16, t0: f64, log_frame: &[f64], thresholds: ThresholdModel) -> Result<Self, SimError> {
        let n = width as usize * height as usize;
        if log_frame.len() != n {
            return Err(SimError::FrameSize {
                expected: n,
                got: log_frame.len(),
            });
        }
        Ok(Self {
            width,
            height,
            thresholds,
            reference: log_frame.to_vec(),
            last: log_frame.to_vec(),
            last_t: t0,
            events: Vec::new(),
        })
    }

    pub fn from_frame(frame: &GrayImage, t0: f64, thresholds: ThresholdModel) -> Result<Self, SimError> {
        let log: Vec<f64> = frame.data().iter().map(|&v| log_intensity(v)).collect();
        Self::from_log(frame.width() as u16, frame.height() as u16, t0, &log, thresholds)
    }

    /// Adds the next log-intensity sample at time `t`.
    pub fn push_log(&mut self, t: f64, log_frame: &[f64]) -> Result<(), SimError> {
        if log_frame.len() != self.last.len() {
            return Err(SimError::FrameSize {
                expected: self.last.len(),
                got: log_frame.len(),
            });
        }
        if !(t > self.last_t) {
            return Err(SimError::SampleOrder { t, last: self.last_t });
        }
        let (t0, dt) = (self.last_t, t - self.last_t);
        let start = self.events.len();
        let w = self.width as usize;
        for (i, &l1) in log_frame.iter().enumerate() {
            let l0 = self.last[i];
            let reference = self.reference[i];
            let diff = l1 - reference;
            let (theta, polarity) = if diff > 0.0 {
                (self.thresholds.theta_pos, Polarity::Positive)
            } else {
                (self.thresholds.theta_neg, Polarity::Negative)
            };
            let k = Float::floor(diff.abs() / theta + CROSSING_TOL) as usize;
            if k > 0 {
                let sign = diff.signum();
                let span = l1 - l0;
                let (x, y) = ((i % w) as u16, (i / w) as u16);
                for j in 1..=k {
                    let level = reference + sign * j as f64 * theta;
                    let frac = if span == 0.0 {
                        1.0
                    } else {
                        ((level - l0) / span).clamp(0.0, 1.0)
                    };
                    let et = if j == k && frac > 1.0 - 1e-12 { t } else { t0 + frac * dt };
                    self.events.push(Event::new(et, x, y, polarity));
                }
                self.reference[i] = reference + sign * k as f64 * theta;
            }
            self.last[i] = l1;
        }
        self.events[start..].sort_by(|a, b| {
            a.t.total_cmp(&b.t)
                .then((a.y as usize * w + a.x as usize).cmp(&(b.y as usize * w + b.x as usize)))
        });
        self.last_t = t;
        Ok(())
    }

    pub fn push_frame(&mut self, t: f64, frame: &GrayImage) -> Result<(), SimError> {
        let log: Vec<f64> = frame.data().iter().map(|&v| log_intensity(v)).collect();
        self.push_log(t, &log)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn finish(self) -> Result<EventStream, SimError> {
        Ok(EventStream::new(self.width, self.height, self.events)?)
    }
}

/// Samples the trajectory at `fs` Hz over its whole time span and returns the
/// LR events.
pub fn generate_events(
    texture: &GrayImage,
    trajectory: &Trajectory,
    cams: &CameraPair,
    thresholds: ThresholdModel,
    fs: f64,
) -> Result<EventStream, SimError> {
    if !(fs > 0.0) {
        return Err(SimError::SampleRate(fs));
    }
    let t0 = trajectory.start();
    let samples = Float::ceil((trajectory.end() - t0) * fs) as usize;
    let (lr, _) = render_pair(texture, &trajectory.pose_at(t0), cams)?;
    let mut gen = EventGenerator::from_frame(&lr, t0, thresholds)?;
    for k in 1..=samples {
        let t = t0 + k as f64 / fs;
        let (lr, _) = render_pair(texture, &trajectory.pose_at(t), cams)?;
        gen.push_frame(t, &lr)?;
    }
    gen.finish()
}

/// Procedural texture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TextureKind {
    /// Random rectangles and disks with flat gray levels.
    #[default]
    Shapes,
    /// Axis-aligned checkerboard with a random cell size.
    Checker,
    /// Sum of random Gaussian blobs.
    Blobs,
}

/// Generates a texture in `[0.05, 0.95]`, lightly blurred to limit aliasing.
pub fn procedural_texture(kind: TextureKind, width: usize, height: usize, rng: &mut impl Rng) -> GrayImage {
    let (wf, hf) = (width as f64, height as f64);
    let img = match kind {
        TextureKind::Shapes => {
            let mut img = GrayImage::filled(width, height, rng.random_range(0.2..0.8));
            let count = (width * height / 400).max(8);
            for _ in 0..count {
                let value = rng.random_range(0.05..0.95);
                let cx = rng.random_range(0.0..wf);
                let cy = rng.random_range(0.0..hf);
                let r = rng.random_range(0.03..0.12) * wf.min(hf);
                if rng.random_bool(0.5) {
                    let (rx, ry) = (r, r * rng.random_range(0.4..1.6));
                    fill(&mut img, |x, y| (x - cx).abs() <= rx && (y - cy).abs() <= ry, value);
                } else {
                    fill(&mut img, |x, y| (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r, value);
                }
            }
            img
        }
        TextureKind::Checker => {
            let cell = rng.random_range(4..=12) as usize;
            let (a, b) = (rng.random_range(0.05..0.35), rng.random_range(0.65..0.95));
            GrayImage::from_fn(width, height, |x, y| if (x / cell + y / cell) % 2 == 0 { a } else { b })
        }
        TextureKind::Blobs => {
            let count = (width * height / 300).max(6);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..wf),
                        rng.random_range(0.0..hf),
                        rng.random_range(0.02..0.08) * wf.min(hf),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            GrayImage::from_fn(width, height, |x, y| {
                let s: f64 = blobs
                    .iter()
                    .map(|&(bx, by, r, a)| {
                        let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                        a * Float::exp(-d2 / (2.0 * r * r))
                    })
                    .sum();
                0.5 + 0.45 * Float::tanh(s)
            })
        }
    };
    img.gaussian_blur(0.7).map(|v| v.clamp(0.05, 0.95))
}

fn fill(img: &mut GrayImage, inside: impl Fn(f64, f64) -> bool, value: f64) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            if inside(x as f64, y as f64) {
                img.set(x, y, value);
            }
        }
    }
}

/// Bounds for random planar motion over a texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionConfig {
    /// Sequence duration in seconds.
    pub duration: f64,
    /// Number of linear segments.
    pub segments: usize,
    /// Camera distance at the rest pose, in texels.
    pub distance: f64,
    /// Maximum lateral offset of key poses from the origin, in texels.
    pub max_shift: f64,
    /// Maximum relative change of the distance.
    pub max_zoom: f64,
    /// Maximum tilt about x and y, radians.
    pub max_tilt: f64,
    /// Maximum roll about the optical axis, radians.
    pub max_roll: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            duration: 1.0,
            segments: 4,
            distance: 64.0,
            max_shift: 24.0,
            max_zoom: 0.1,
            max_tilt: 0.1,
            max_roll: PI / 12.0,
        }
    }
}

/// Random piecewise-linear 6-DoF trajectory starting at `t = 0`.
pub fn random_trajectory(cfg: &MotionConfig, rng: &mut impl Rng) -> Result<Trajectory, SimError> {
    if cfg.segments == 0 || !(cfg.duration > 0.0) || !(cfg.distance > 0.0) || !(cfg.max_zoom < 1.0) {
        return Err(SimError::Config("motion"));
    }
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let keys = (0..=cfg.segments)
        .map(|k| {
            let t = cfg.duration * k as f64 / cfg.segments as f64;
            let pose = Pose {
                center: [
                    sym(cfg.max_shift),
                    sym(cfg.max_shift),
                    -cfg.distance * (1.0 + sym(cfg.max_zoom)),
                ],
                rotation: [sym(cfg.max_tilt), sym(cfg.max_tilt), sym(cfg.max_roll)],
            };
            (t, pose)
        })
        .collect();
    Trajectory::new(keys)
}

/// Everything needed to synthesize one training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceConfig {
    pub cameras: CameraPair,
    pub motion: MotionConfig,
    pub texture: TextureKind,
    /// Texture side length in texels.
    pub texture_size: usize,
    pub theta_range: (f64, f64),
    pub fs: f64,
    /// Ground-truth anchors per sequence.
    pub anchors: usize,
    /// Events that must precede each anchor's event index.
    pub margin_before: usize,
    /// Events that must follow each anchor's event index.
    pub margin_after: usize,
    /// Redraws of motion and thresholds before giving up on a short stream.
    pub attempts: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        let cameras = CameraPair {
            lr_width: 32,
            lr_height: 32,
            scale: 2,
            focal_lr: 32.0,
        };
        Self {
            cameras,
            motion: MotionConfig::default(),
            texture: TextureKind::Shapes,
            texture_size: 160,
            theta_range: (0.1, 0.5),
            fs: 1000.0,
            anchors: 1,
            margin_before: 2400,
            margin_after: 1800,
            attempts: 8,
        }
    }
}

impl SequenceConfig {
    /// Margins that leave room for `length` stacks of `m` events with overlap
    /// `overlap` around every anchor.
    pub fn with_stack_margins(mut self, m: usize, length: usize, overlap: usize) -> Self {
        let half = length / 2;
        self.margin_before = m + half * (m - overlap);
        self.margin_after = half * (m - overlap);
        self
    }
}

/// A simulated sequence with ground truth at the anchor timestamps.
#[derive(Debug, Clone)]
pub struct SimulatedSequence {
    pub texture: GrayImage,
    pub trajectory: Trajectory,
    pub thresholds: ThresholdModel,
    pub events: EventStream,
    pub anchors: Vec<f64>,
    pub hr_frames: Vec<GrayImage>,
    pub lr_frames: Vec<GrayImage>,
}

/// Timestamp grid of simulated sequences (1 ns); matches the nine decimals of the
/// event text format, so written sequences read back unchanged.
pub const TICKS_PER_SECOND: f64 = 1e9;

/// Rounds every timestamp to a whole number of ticks.
pub fn quantize_times(stream: EventStream) -> Result<EventStream, SimError> {
    let (w, h) = (stream.width(), stream.height());
    let events = stream
        .into_events()
        .into_iter()
        .map(|mut e| {
            e.t = Float::round(e.t * TICKS_PER_SECOND) / TICKS_PER_SECOND;
            e
        })
        .collect();
    Ok(EventStream::new(w, h, events)?)
}

/// Event indices of `count` anchors spread evenly over `[lo, hi]`.
pub fn anchor_indices(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![lo + (hi - lo) / 2];
    }
    (0..count).map(|k| lo + (hi - lo) * (k + 1) / (count + 1)).collect()
}

/// Draws a texture, trajectory and thresholds, simulates events and renders
/// ground truth at anchors chosen by event index.
pub fn simulate_sequence(cfg: &SequenceConfig, rng: &mut impl Rng) -> Result<SimulatedSequence, SimError> {
    let texture = procedural_texture(cfg.texture, cfg.texture_size, cfg.texture_size, rng);
    simulate_with_texture(cfg, texture, rng)
}

/// [`simulate_sequence`] on a given texture in `[0, 1]`, centered on the plane.
pub fn simulate_with_texture(
    cfg: &SequenceConfig,
    texture: GrayImage,
    rng: &mut impl Rng,
) -> Result<SimulatedSequence, SimError> {
    if cfg.anchors == 0 || cfg.cameras.scale == 0 {
        return Err(SimError::Config("anchors and scale must be positive"));
    }
    if texture.width() < 2 || texture.height() < 2 {
        return Err(SimError::Config("texture must be at least 2x2"));
    }
    let needed = cfg.margin_before + cfg.margin_after + cfg.anchors;
    let mut best = 0;
    for _ in 0..cfg.attempts.max(1) {
        let trajectory = random_trajectory(&cfg.motion, rng)?;
        let thresholds = ThresholdModel::sample(cfg.theta_range, rng)?;
        let events = quantize_times(generate_events(&texture, &trajectory, &cfg.cameras, thresholds, cfg.fs)?)?;
        if events.len() < needed {
            best = best.max(events.len());
            continue;
        }
        let lo = cfg.margin_before;
        let hi = events.len() - 1 - cfg.margin_after;
        // With tied timestamps the stack boundary falls on the first event of
        // the tie, so step past ties that would break the left margin.
        let anchors: Vec<f64> = anchor_indices(lo, hi, cfg.anchors)
            .into_iter()
            .map(|mut i| {
                while events.first_at_or_after(events.events()[i].t) < lo {
                    i += 1;
                }
                events.events()[i].t
            })
            .collect();
        let mut hr_frames = Vec::with_capacity(anchors.len());
        let mut lr_frames = Vec::with_capacity(anchors.len());
        for &t in &anchors {
            let (lr, hr) = render_pair(&texture, &trajectory.pose_at(t), &cfg.cameras)?;
            hr_frames.push(hr);
            lr_frames.push(lr);
        }
        return Ok(SimulatedSequence {
            texture,
            trajectory,
            thresholds,
            events,
            anchors,
            hr_frames,
            lr_frames,
        });
    }
    Err(SimError::TooFewEvents {
        got: best,
        needed,
        attempts: cfg.attempts.max(1),
    })
}
