//! Command-line interface: `simulate | stack | train | infer | eval | smoke`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use evsr_core::flow::FlowConfig;
use evsr_core::network::{infer, prepare_sequence, InferenceMode};
use evsr_core::stacking::{build_sequence, StackConfig};
use serde::Serialize;

use crate::checkpoint::{check_arch, load_weights};
use crate::config::{ImageFormat, Preset, RunConfig, TextureFamily};
use crate::dataset::{generate_dataset, load_dataset, split, Dataset};
use crate::error::{Error, Result};
use crate::eval::{constant_baseline, evaluate, mean_image, write_report_csv};
use crate::io::{read_events, read_image, write_image, write_json, write_u8_plane, BitDepth, SensorSize};
use crate::samples::{prepare_samples, PreparedSample, SampleSpec};
use crate::trainer::{train, TrainOptions, FINAL_CHECKPOINT};

/// Budget of the `smoke` pipeline.
pub const SMOKE_BUDGET: Duration = Duration::from_secs(300);

#[derive(Debug, Parser)]
#[command(name = "evsr", version, about = "Super-resolved intensity images from event streams")]
pub struct Cli {
    /// TOML configuration; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record that the run must be bit-reproducible. Results are already
    /// independent of the thread count; the flag is echoed with the config.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for per-sample work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset of event sequences with HR/LR ground truth.
    Simulate(SimulateArgs),
    /// Cut an event file into a stack sequence and write each channel.
    Stack(StackArgs),
    /// Train a model on a simulated dataset.
    Train(TrainArgs),
    /// Reconstruct images at anchor times from an event file.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Simulate, train, infer and evaluate a tiny setup end to end.
    Smoke(SmokeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory of texture images (PNG/PGM); procedural textures otherwise.
    #[arg(long)]
    pub textures: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long, value_parser = ["2", "4"])]
    pub scale: Option<String>,
    /// LR sensor size, WxH.
    #[arg(long)]
    pub lr_size: Option<SensorSize>,
    /// Log-intensity sampling rate in Hz.
    #[arg(long)]
    pub fs: Option<f64>,
    /// Contrast threshold range, `LO,HI`.
    #[arg(long, value_parser = parse_range)]
    pub theta_range: Option<(f64, f64)>,
    /// Ground-truth frames per sequence.
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long, value_enum)]
    pub texture: Option<TextureFamily>,
    #[arg(long, value_enum)]
    pub format: Option<ImageFormat>,
}

#[derive(Debug, Args)]
pub struct StackArgs {
    #[arg(long)]
    pub events: PathBuf,
    /// Sensor size WxH; read from the sidecar next to the events otherwise.
    #[arg(long)]
    pub sensor_size: Option<SensorSize>,
    #[arg(long)]
    pub events_per_channel: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_parser = ["3", "7"])]
    pub sequence_length: Option<String>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub anchor_time: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Must match the dataset's scale.
    #[arg(long, value_parser = ["2", "4"])]
    pub scale: Option<String>,
    #[arg(long, value_parser = ["3", "7"])]
    pub seq_len: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Train with zero flow.
    #[arg(long)]
    pub no_flow: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Main,
    DuoPass,
    Complementary,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub sensor_size: Option<SensorSize>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Main)]
    pub mode: Mode,
    /// Anchor timestamps in seconds; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    pub anchor_time: Vec<f64>,
    /// LR intensity frame(s) for complementary mode: one for all anchors or
    /// one per anchor.
    #[arg(long)]
    pub lr_frame: Vec<PathBuf>,
    #[arg(long)]
    pub events_per_channel: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub no_flow: bool,
    #[arg(long, value_enum)]
    pub bit_depth: Option<BitDepth>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// The validation split used during training.
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Evaluate with zero flow.
    #[arg(long)]
    pub no_flow: bool,
    /// Expected sequence length; checked against the checkpoint.
    #[arg(long, value_parser = ["3", "7"])]
    pub seq_len: Option<String>,
    /// Expected preset; checked against the checkpoint.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SmokeArgs {
    /// Working directory; a fresh directory under the system temp dir otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub textures: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn num(s: &Option<String>) -> Option<usize> {
    s.as_deref().map(|v| v.parse().expect("validated by clap"))
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t.max(1);
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Simulate(a) => simulate(&mut cfg, a),
        Command::Stack(a) => stack(&mut cfg, a),
        Command::Train(a) => train_cmd(&mut cfg, a, cli.config.is_some()),
        Command::Infer(a) => infer_cmd(&mut cfg, a),
        Command::Eval(a) => eval_cmd(&mut cfg, a, cli.config.is_some()),
        Command::Smoke(a) => smoke(&mut cfg, a).map(|_| ()),
    }
}

fn simulate(cfg: &mut RunConfig, a: SimulateArgs) -> Result<()> {
    let d = &mut cfg.data;
    if a.textures.is_some() {
        d.textures = a.textures;
    }
    if let Some(v) = a.sequences {
        d.sequences = v;
    }
    if let Some(v) = num(&a.scale) {
        d.scale = v;
    }
    if let Some(v) = a.lr_size {
        d.lr_width = v.width as usize;
        d.lr_height = v.height as usize;
    }
    if let Some(v) = a.fs {
        d.fs = v;
    }
    if let Some(v) = a.theta_range {
        d.theta_range = v;
    }
    if let Some(v) = a.anchors {
        d.anchors = v;
    }
    if let Some(v) = a.texture {
        d.texture = v;
    }
    if let Some(v) = a.format {
        d.image_format = v;
    }
    let manifest = generate_dataset(cfg, &a.out)?;
    cfg.echo(&a.out)?;
    println!("wrote {} sequences to {}", manifest.sequences.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct StackRecord {
    index: usize,
    first_index: usize,
    last_index: usize,
    t_start: f64,
    t_end: f64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct StackManifest {
    anchor_time: f64,
    events_per_channel: usize,
    channels: usize,
    overlap: usize,
    central_index: usize,
    stacks: Vec<StackRecord>,
}

fn stack(cfg: &mut RunConfig, a: StackArgs) -> Result<()> {
    if let Some(v) = a.events_per_channel {
        cfg.stack.events_per_channel = v;
    }
    if let Some(v) = a.channels {
        cfg.stack.channels = v;
    }
    if let Some(v) = a.overlap {
        cfg.stack.overlap = v;
    }
    if let Some(v) = num(&a.sequence_length) {
        cfg.model.sequence_length = v;
    }
    let sc = cfg.stack.stack_config()?;
    let events = read_events(&a.events, a.sensor_size)?;
    let seq = build_sequence(&events, a.anchor_time, &sc, cfg.model.sequence_length, cfg.stack.overlap)?;
    let mut records = Vec::with_capacity(seq.len());
    for (k, s) in seq.stacks.iter().enumerate() {
        let mut files = Vec::with_capacity(s.channels());
        for c in 0..s.channels() {
            let name = format!("stack_{k}_c{c}.png");
            write_u8_plane(&a.out.join(&name), s.width(), s.height(), s.channel(c))?;
            files.push(name);
        }
        records.push(StackRecord {
            index: k,
            first_index: s.first_index,
            last_index: s.last_index,
            t_start: s.t_start,
            t_end: s.t_end,
            files,
        });
    }
    write_json(
        &a.out.join("manifest.json"),
        &StackManifest {
            anchor_time: a.anchor_time,
            events_per_channel: sc.events_per_channel,
            channels: sc.channels,
            overlap: cfg.stack.overlap,
            central_index: seq.central_index(),
            stacks: records,
        },
    )?;
    cfg.echo(&a.out)?;
    println!("wrote {} stacks to {}", seq.len(), a.out.display());
    Ok(())
}

/// Training and validation samples of a dataset.
pub struct SplitSamples {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
}

pub fn sample_spec(cfg: &RunConfig, sequence_length: usize, use_flow: bool) -> Result<SampleSpec> {
    Ok(SampleSpec {
        stack: cfg.stack.stack_config()?,
        overlap: cfg.stack.overlap,
        sequence_length,
        flow: use_flow.then(FlowConfig::stacks),
    })
}

/// Splits by name hash and builds the samples of both parts.
pub fn split_samples(ds: &Dataset, spec: &SampleSpec, fraction: f64, threads: usize) -> Result<SplitSamples> {
    let names: Vec<String> = ds.sequences.iter().map(|s| s.name.clone()).collect();
    let (tr, va) = split(&names, fraction);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.sequences[i]).collect::<Vec<_>>();
    Ok(SplitSamples {
        train: prepare_samples(&pick(&tr), spec, threads)?,
        val: prepare_samples(&pick(&va), spec, threads)?,
    })
}

/// Dataset scale and stacking replace the configured ones.
fn adopt_dataset(cfg: &mut RunConfig, ds: &Dataset, scale_flag: Option<usize>) -> Result<()> {
    if let Some(s) = scale_flag.filter(|&s| s != ds.manifest.data.scale) {
        return Err(Error::Config(format!(
            "--scale {s} does not match the dataset scale {}",
            ds.manifest.data.scale
        )));
    }
    cfg.data = ds.manifest.data.clone();
    cfg.stack = ds.manifest.stack.clone();
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig, a: TrainArgs, _from_file: bool) -> Result<()> {
    let ds = load_dataset(&a.dataset, cfg.threads)?;
    adopt_dataset(cfg, &ds, num(&a.scale))?;
    if let Some(v) = num(&a.seq_len) {
        cfg.model.sequence_length = v;
    }
    if let Some(v) = a.preset {
        cfg.model.preset = v;
    }
    if a.no_flow {
        cfg.model.use_flow = false;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr0 {
        cfg.train.lr0 = v;
    }
    cfg.train.validate()?;
    let arch = cfg.arch()?;
    cfg.echo(&a.out)?;
    let spec = sample_spec(cfg, arch.sequence_length, cfg.model.use_flow)?;
    let sets = split_samples(&ds, &spec, cfg.train.validation_fraction, cfg.threads)?;
    let opts = TrainOptions {
        arch,
        train: cfg.train.clone(),
        normalize: spec.stack.normalize,
        seed: cfg.seed,
        threads: cfg.threads,
        out: Some(a.out.clone()),
        verbose: !a.quiet,
    };
    let out = train(&sets.train, &sets.val, &opts)?;
    let last = out.log.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} samples: final loss {:.5}, validation psnr {}; checkpoint {}",
        out.log.epochs.len(),
        sets.train.len(),
        last.mean_loss,
        last.val_psnr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
        a.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn infer_cmd(cfg: &mut RunConfig, a: InferArgs) -> Result<()> {
    if let Some(v) = a.events_per_channel {
        cfg.stack.events_per_channel = v;
    }
    if let Some(v) = a.overlap {
        cfg.stack.overlap = v;
    }
    if let Some(v) = a.bit_depth {
        cfg.train.bit_depth = v;
    }
    if a.no_flow {
        cfg.model.use_flow = false;
    }
    match (a.mode, a.lr_frame.len()) {
        (Mode::Complementary, 0) => {
            return Err(Error::Config("complementary mode requires --lr-frame".into()));
        }
        (Mode::Complementary, n) if n != 1 && n != a.anchor_time.len() => {
            return Err(Error::Config(format!(
                "got {n} --lr-frame values for {} anchors; pass one or one per anchor",
                a.anchor_time.len()
            )));
        }
        (Mode::Main | Mode::DuoPass, n) if n > 0 => {
            return Err(Error::Config("--lr-frame is only used in complementary mode".into()));
        }
        _ => {}
    }
    let weights = load_weights(&a.checkpoint)?;
    let arch = *weights.arch();
    cfg.stack.channels = arch.stack_channels;
    cfg.data.scale = arch.scale;
    cfg.model.sequence_length = arch.sequence_length;
    let sc: StackConfig = cfg.stack.stack_config()?;
    let events = read_events(&a.events, a.sensor_size)?;
    let flow = cfg.model.use_flow.then(FlowConfig::stacks);
    let depth = cfg.train.bit_depth;
    for (k, &t) in a.anchor_time.iter().enumerate() {
        let seq = build_sequence(&events, t, &sc, arch.sequence_length, cfg.stack.overlap)?;
        let input = prepare_sequence::<f32>(&seq, sc.normalize, flow.as_ref())?;
        let mode = match a.mode {
            Mode::Main => InferenceMode::Main,
            Mode::DuoPass => InferenceMode::DuoPass,
            Mode::Complementary => {
                let path = &a.lr_frame[if a.lr_frame.len() == 1 { 0 } else { k }];
                InferenceMode::Complementary(read_image(path)?)
            }
        };
        let res = infer(&weights, &input, &mode, sc.normalize)?;
        let central = seq.central();
        for c in 0..central.channels() {
            write_u8_plane(
                &a.out.join(format!("anchor_{k:03}_stack_c{c}.png")),
                central.width(),
                central.height(),
                central.channel(c),
            )?;
        }
        if let Some(first) = &res.first_pass {
            write_image(&a.out.join(format!("anchor_{k:03}_pass1.png")), first, depth)?;
            write_image(&a.out.join(format!("anchor_{k:03}_pass2.png")), &res.output, depth)?;
        }
        write_image(&a.out.join(format!("anchor_{k:03}.png")), &res.output, depth)?;
    }
    cfg.echo(&a.out)?;
    println!("wrote {} reconstructions to {}", a.anchor_time.len(), a.out.display());
    Ok(())
}

/// Mean metrics of an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
}

fn eval_cmd(cfg: &mut RunConfig, a: EvalArgs, from_file: bool) -> Result<()> {
    let ds = load_dataset(&a.dataset, cfg.threads)?;
    adopt_dataset(cfg, &ds, None)?;
    let weights = load_weights(&a.checkpoint)?;
    let explicit = from_file || a.seq_len.is_some() || a.preset.is_some();
    if let Some(v) = num(&a.seq_len) {
        cfg.model.sequence_length = v;
    }
    if let Some(v) = a.preset {
        cfg.model.preset = v;
    }
    if explicit {
        check_arch(&cfg.arch()?, &weights)?;
    }
    if a.no_flow {
        cfg.model.use_flow = false;
    }
    let arch = *weights.arch();
    if arch.scale != ds.manifest.data.scale || arch.stack_channels != ds.manifest.stack.channels {
        return Err(Error::ArchMismatch {
            expected: Box::new(cfg.arch().unwrap_or(arch)),
            got: Box::new(arch),
        });
    }
    let summary = eval_dataset(cfg, &ds, &weights, a.split, a.no_flow, &a.out)?;
    cfg.echo(&a.out)?;
    println!(
        "psnr {:.3} ssim {:.4} (mean-image baseline psnr {:.3}); table {}",
        summary.psnr,
        summary.ssim,
        summary.baseline_psnr,
        a.out.join("metrics.csv").display()
    );
    Ok(())
}

fn eval_dataset(
    cfg: &RunConfig,
    ds: &Dataset,
    weights: &evsr_core::network::ModelWeights<f32>,
    which: Split,
    zero_flow: bool,
    out: &Path,
) -> Result<EvalSummary> {
    let arch = weights.arch();
    let spec = sample_spec(cfg, arch.sequence_length, !zero_flow)?;
    let sets = split_samples(ds, &spec, cfg.train.validation_fraction, cfg.threads)?;
    let test = match which {
        Split::Val => sets.val,
        Split::All => {
            let mut all = sets.train.clone();
            all.extend(sets.val);
            all
        }
    };
    let eval = evaluate(weights, &test, spec.stack.normalize, zero_flow, cfg.threads)?;
    write_report_csv(&out.join("metrics.csv"), &eval.report)?;
    let mean = mean_image(&sets.train.iter().map(|s| &s.target).collect::<Vec<_>>());
    let base = constant_baseline(&mean, &test)?;
    Ok(EvalSummary {
        psnr: eval.report.psnr,
        ssim: eval.report.ssim,
        baseline_psnr: base.psnr,
    })
}

/// Wall time and results of the `smoke` pipeline.
#[derive(Debug, Clone)]
pub struct SmokeReport {
    pub root: PathBuf,
    pub elapsed: Duration,
    pub summary: EvalSummary,
}

/// Four tiny sequences, two training epochs, inference in every mode on one
/// sequence and evaluation.
pub fn smoke(cfg: &mut RunConfig, a: SmokeArgs) -> Result<SmokeReport> {
    let started = Instant::now();
    let root = match a.out {
        Some(p) => p,
        None => std::env::temp_dir().join(format!("evsr-smoke-{}-{}", cfg.seed, std::process::id())),
    };
    cfg.data.sequences = 4;
    cfg.data.anchors = 2;
    cfg.data.max_sequence_length = 3;
    cfg.data.textures = a.textures;
    cfg.model.preset = Preset::Toy;
    cfg.model.sequence_length = 3;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    let data_dir = root.join("data");
    let run_dir = root.join("run");
    generate_dataset(cfg, &data_dir)?;
    cfg.echo(&root)?;
    let ds = load_dataset(&data_dir, cfg.threads)?;
    let arch = cfg.arch()?;
    let spec = sample_spec(cfg, arch.sequence_length, true)?;
    let sets = split_samples(&ds, &spec, cfg.train.validation_fraction, cfg.threads)?;
    let opts = TrainOptions {
        arch,
        train: cfg.train.clone(),
        normalize: spec.stack.normalize,
        seed: cfg.seed,
        threads: cfg.threads,
        out: Some(run_dir.clone()),
        verbose: false,
    };
    train(&sets.train, &sets.val, &opts)?;
    let ckpt = run_dir.join(FINAL_CHECKPOINT);
    let seq = &ds.sequences[0];
    let events_path = data_dir.join(&seq.name).join(crate::dataset::EVENTS_FILE);
    let anchors = seq.anchors();
    for (mode, lr_frame) in [
        (Mode::Main, Vec::new()),
        (Mode::DuoPass, Vec::new()),
        (
            Mode::Complementary,
            vec![data_dir.join(&seq.name).join(&seq.meta.frames[0].lr)],
        ),
    ] {
        let name = format!("{mode:?}").to_lowercase();
        infer_cmd(
            &mut cfg.clone(),
            InferArgs {
                events: events_path.clone(),
                sensor_size: None,
                checkpoint: ckpt.clone(),
                mode,
                anchor_time: anchors.clone(),
                lr_frame,
                events_per_channel: None,
                overlap: None,
                no_flow: false,
                bit_depth: None,
                out: root.join("infer").join(name),
            },
        )?;
    }
    let weights = load_weights(&ckpt)?;
    let summary = eval_dataset(cfg, &ds, &weights, Split::Val, false, &root.join("eval"))?;
    let elapsed = started.elapsed();
    println!(
        "smoke finished in {:.1}s: psnr {:.3}, mean-image baseline {:.3}; outputs in {}",
        elapsed.as_secs_f64(),
        summary.psnr,
        summary.baseline_psnr,
        root.display()
    );
    if elapsed > SMOKE_BUDGET {
        return Err(Error::Config(format!(
            "smoke run took {:.1}s, over the {}s budget",
            elapsed.as_secs_f64(),
            SMOKE_BUDGET.as_secs()
        )));
    }
    Ok(SmokeReport { root, elapsed, summary })
}
