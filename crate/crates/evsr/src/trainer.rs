//! Deterministic training loop.
//!
//! Fixed init seed, a per-epoch shuffle drawn from `(seed, epoch)` and batch
//! gradients summed in sample order make every logged number and checkpoint
//! a function of `(seed, config, dataset)` only, whatever the thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use evsr_core::loss::FeatureEncoder;
use evsr_core::network::{ArchConfig, ModelWeights};
use evsr_core::stacking::NormalizeMode;
use evsr_core::train::{
    average_gradients, clip_global_norm, lr_at, sample_gradients, Adam, AdamConfig, TrainError,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_weights;
use crate::config::TrainSection;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::io::write_bytes;
use crate::par::map_indexed;
use crate::samples::PreparedSample;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "model.e2sr";
pub const STEP_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub normalize: NormalizeMode,
    pub seed: u64,
    pub threads: usize,
    /// Directory for checkpoints and logs; nothing is written when `None`.
    pub out: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub lpips: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Initial rate actually used, after any restart.
    pub lr0: f64,
    /// Restarts with a halved rate after a non-finite first-epoch loss.
    pub restarts: usize,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,l1,lpips,total,grad_norm\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{:e},{:.9},{:.9},{:.9},{:.9}",
                s.step, s.epoch, s.lr, s.l1, s.lpips, s.total, s.grad_norm
            )
            .expect("string");
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss,val_psnr,val_ssim\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:e},{:.9},{},{}",
                e.epoch,
                e.lr,
                e.mean_loss,
                opt(e.val_psnr),
                opt(e.val_ssim)
            )
            .expect("string");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub log: TrainLog,
}

/// RNG of the shuffle before `epoch`.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

enum Attempt {
    Done(TrainOutcome),
    /// Non-finite loss during the first epoch.
    Diverged,
}

pub fn train(train_set: &[PreparedSample], val_set: &[PreparedSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.train.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut lr0 = opts.train.lr0;
    let mut restarts = 0;
    loop {
        match attempt(train_set, val_set, opts, lr0, restarts)? {
            Attempt::Done(out) => return Ok(out),
            Attempt::Diverged if restarts == 0 => {
                if opts.verbose {
                    eprintln!("non-finite loss in the first epoch; restarting with lr0 = {}", lr0 / 2.0);
                }
                lr0 /= 2.0;
                restarts += 1;
            }
            Attempt::Diverged => unreachable!("second attempt reports its own error"),
        }
    }
}

fn attempt(
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    opts: &TrainOptions,
    lr0: f64,
    restarts: usize,
) -> Result<Attempt> {
    let cfg = &opts.train;
    let encoder = FeatureEncoder::<f32>::default();
    let mut weights = ModelWeights::<f32>::init(opts.arch, opts.seed)?;
    let mut adam = Adam::new(AdamConfig::default(), weights.tensors());
    let mut log = TrainLog {
        lr0,
        restarts,
        ..TrainLog::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg.epochs, lr0);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(opts.seed, epoch));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = map_indexed(batch.len(), opts.threads, |k| {
                sample_gradients(&weights, &encoder, &train_set[batch[k]].sample, cfg.lambda)
            });
            let mut grads = Vec::with_capacity(batch.len());
            let (mut l1, mut lpips, mut total) = (0.0, 0.0, 0.0);
            for r in results {
                match r {
                    Ok((v, g)) => {
                        l1 += v.l1;
                        lpips += v.lpips;
                        total += v.total;
                        grads.push(g);
                    }
                    Err(TrainError::NonFinite { loss, .. }) => {
                        if epoch == 0 && restarts == 0 {
                            return Ok(Attempt::Diverged);
                        }
                        return Err(Error::NonFinite { epoch, step, lr, loss });
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let n = batch.len() as f64;
            let mut grads = average_gradients(grads)?;
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                if epoch == 0 && restarts == 0 {
                    return Ok(Attempt::Diverged);
                }
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    lr,
                    loss: grad_norm,
                });
            }
            adam.step(weights.tensors_mut(), &grads, lr);
            loss_sum += total;
            log.steps.push(StepLog {
                step,
                epoch,
                lr,
                l1: l1 / n,
                lpips: lpips / n,
                total: total / n,
                grad_norm,
            });
            step += 1;
        }
        let mean_loss = loss_sum / train_set.len() as f64;
        let (val_psnr, val_ssim) = if val_set.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&weights, val_set, opts.normalize, false, opts.threads)?.report;
            (Some(r.psnr), Some(r.ssim))
        };
        log.epochs.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            val_psnr,
            val_ssim,
        });
        if opts.verbose {
            eprintln!(
                "epoch {epoch:3} lr {lr:.1e} loss {mean_loss:.5} val psnr {} ({:.1}s)",
                val_psnr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(out) = &opts.out {
            save_weights(&out.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:03}.e2sr")), &weights)?;
            write_logs(out, &log)?;
        }
    }
    if let Some(out) = &opts.out {
        save_weights(&out.join(FINAL_CHECKPOINT), &weights)?;
    }
    Ok(Attempt::Done(TrainOutcome { weights, log }))
}

fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    write_bytes(&dir.join(STEP_LOG), log.steps_csv().as_bytes())?;
    write_bytes(&dir.join(EPOCH_LOG), log.epochs_csv().as_bytes())
}
