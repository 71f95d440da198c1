//! Minibatch training for both models, with optimizers, per-epoch metrics
//! and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ModelKind, TrainingMeta, FORMAT_VERSION, MAGIC};
pub use metrics::{EpochMetrics, MetricsLog, METRICS_HEADER};
pub use optim::{
    clip_grad_norm, grad_norm, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, MOMENTUM,
};

use crate::crnn::{min_frames, sequence_accuracy, Crnn, CrnnConfig, LabelSeq};
use crate::error::{Error, Result};
use crate::nn::{Mode, Session};
use crate::synth::{Dataset, Which};
use crate::tensor::{Rng, Tape};
use crate::vae::{Vae, VaeConfig};

/// Gradient-norm ceiling applied to CRNN updates.
pub const CRNN_CLIP_NORM: f64 = 5.0;
/// Epoch losses kept in checkpoint metadata.
pub const LOSS_TAIL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Toy,
}

impl Scale {
    pub fn vae(self) -> VaeConfig {
        match self {
            Scale::Paper => VaeConfig::paper(),
            Scale::Toy => VaeConfig::toy(),
        }
    }

    pub fn crnn(self) -> CrnnConfig {
        match self {
            Scale::Paper => CrnnConfig::paper(),
            Scale::Toy => CrnnConfig::toy(),
        }
    }

    /// `(height, width)` of the images this scale expects.
    pub fn canvas(self) -> (usize, usize) {
        self.vae().input_shape
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Toy => "toy",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            _ => Err(Error::InvalidArgument(format!("unknown scale {s:?} (expected paper or toy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub scale: Scale,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn vae(scale: Scale) -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: match scale {
                Scale::Paper => 50,
                Scale::Toy => 15,
            },
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            scale,
            clip_norm: None,
        }
    }

    pub fn crnn(scale: Scale) -> Self {
        TrainConfig {
            epochs: match scale {
                Scale::Paper => 50,
                Scale::Toy => 10,
            },
            clip_norm: Some(CRNN_CLIP_NORM),
            ..Self::vae(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Optional side channels of a training run.
#[derive(Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Rewritten at the end of every epoch, with the metrics CSV beside it.
    pub checkpoint_path: Option<&'a Path>,
    /// Held-out set scored after every epoch (CRNN only).
    pub eval_set: Option<&'a Dataset>,
}

/// `model.ckpt` → `model.metrics.csv`.
pub fn metrics_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.csv")
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = Rng::derive(seed, epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Noise stream for optimizer step `step` (dropout masks and latent draws).
pub fn step_rng(seed: u64, step: usize) -> Rng {
    Rng::derive(seed ^ 0x5EED_57E9, step as u64)
}

fn check_canvas(ds: &Dataset, shape: (usize, usize)) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if (ds.height, ds.width) != shape {
        return Err(Error::shape("dataset images", &[ds.height, ds.width], &[shape.0, shape.1]));
    }
    Ok(())
}

fn tail(log: &MetricsLog) -> Vec<f64> {
    let t = log.totals();
    t[t.len().saturating_sub(LOSS_TAIL)..].to_vec()
}

fn finish_epoch(
    log: &mut MetricsLog,
    row: EpochMetrics,
    checkpoint: &Checkpoint,
    opts: &TrainOptions,
) -> Result<()> {
    log::info!(
        "epoch {} loss {:.4} ({:.1}s){}",
        row.epoch,
        row.loss_total,
        row.seconds,
        row.accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default()
    );
    log.push(row)?;
    if let Some(path) = opts.checkpoint_path {
        checkpoint.save(path)?;
        log.write(&metrics_path(path))?;
    }
    Ok(())
}

/// Trains the VAE to map dot-matrix inputs to their filled-in targets.
pub fn train_vae(ds: &Dataset, model: VaeConfig, config: &TrainConfig, opts: TrainOptions) -> Result<TrainOutput> {
    config.validate()?;
    model.validate()?;
    check_canvas(ds, model.input_shape)?;
    let mut vae = Vae::<f32>::new(model, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut log = MetricsLog::new();
    let mut steps = Vec::new();
    let mut checkpoint = Checkpoint::from_vae(&vae, TrainingMeta::default())?;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        let order = epoch_order(config.seed, epoch, ds.len());
        for idx in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let s = Session::new(&tape, &vae.params, Mode::Train, step_rng(config.seed, steps.len()));
            let x = tape.constant(ds.batch(Which::Input, idx));
            let t = tape.constant(ds.batch(Which::Target, idx));
            let elbo = vae.config.loss(&s, &x, &t)?;
            let mut grads = s.gradients(&elbo.total.backward()?);
            if let Some(c) = config.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let w = idx.len() as f64;
            let l = elbo.total.value().item()? as f64;
            total += w * l;
            recon += w * elbo.reconstruction.value().item()? as f64;
            kl += w * elbo.kl.value().item()? as f64;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    param: "loss".into(),
                    step: steps.len() + 1,
                });
            }
            steps.push(l);
            opt.step(&mut vae.params, &grads)?;
            s.apply_updates(&mut vae.params)?;
        }
        let n = ds.len() as f64;
        let row = EpochMetrics {
            epoch,
            seconds: start.elapsed().as_secs_f64(),
            loss_total: total / n,
            loss_recon: Some(recon / n),
            loss_kl: Some(kl / n),
            loss_ctc: None,
            accuracy: None,
        };
        let mut tail_log = log.clone();
        tail_log.push(row.clone())?;
        checkpoint = Checkpoint::from_vae(
            &vae,
            TrainingMeta {
                epoch: epoch as u32,
                loss_tail: tail(&tail_log),
                rng: Rng::derive(config.seed, epoch as u64),
            },
        )?;
        finish_epoch(&mut log, row, &checkpoint, &opts)?;
    }
    Ok(TrainOutput {
        checkpoint,
        metrics: log,
        step_losses: steps,
    })
}

/// Encodes every label up front so a bad manifest fails before training.
pub fn encode_labels(ds: &Dataset, steps: usize) -> Result<Vec<LabelSeq>> {
    ds.labels
        .iter()
        .map(|l| {
            let seq = LabelSeq::encode(l)?;
            let required = min_frames(seq.indices());
            if required > steps {
                return Err(Error::LabelTooLong {
                    label_len: seq.indices().len(),
                    required,
                    steps,
                });
            }
            Ok(seq)
        })
        .collect()
}

/// Exact-match accuracy of `crnn` reading the filled-in targets of `ds`.
pub fn crnn_accuracy(crnn: &Crnn<f32>, ds: &Dataset, batch: usize) -> Result<f64> {
    check_canvas(ds, crnn.config.input_shape)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch.max(1)) {
        preds.extend(crnn.recognize(&ds.batch(Which::Target, chunk))?);
    }
    sequence_accuracy(&preds, &ds.labels)
}

/// Trains the recognizer on filled-in targets and their labels with CTC.
pub fn train_crnn(ds: &Dataset, model: CrnnConfig, config: &TrainConfig, opts: TrainOptions) -> Result<TrainOutput> {
    config.validate()?;
    model.validate()?;
    check_canvas(ds, model.input_shape)?;
    let labels = encode_labels(ds, model.time_steps())?;
    if let Some(ev) = opts.eval_set {
        check_canvas(ev, model.input_shape)?;
        encode_labels(ev, model.time_steps())?;
    }
    let mut crnn = Crnn::<f32>::new(model, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut log = MetricsLog::new();
    let mut steps = Vec::new();
    let mut checkpoint = Checkpoint::from_crnn(&crnn, TrainingMeta::default())?;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let order = epoch_order(config.seed, epoch, ds.len());
        for idx in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let s = Session::new(&tape, &crnn.params, Mode::Train, step_rng(config.seed, steps.len()));
            let x = tape.constant(ds.batch(Which::Target, idx));
            let batch_labels: Vec<LabelSeq> = idx.iter().map(|&i| labels[i].clone()).collect();
            let loss = crnn.config.loss(&s, &x, &batch_labels)?;
            let l = loss.value().item()? as f64;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    param: "loss".into(),
                    step: steps.len() + 1,
                });
            }
            let mut grads = s.gradients(&loss.backward()?);
            if let Some(c) = config.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            total += idx.len() as f64 * l;
            steps.push(l);
            opt.step(&mut crnn.params, &grads)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        let accuracy = opts
            .eval_set
            .map(|ev| crnn_accuracy(&crnn, ev, config.batch_size))
            .transpose()?;
        let mean = total / ds.len() as f64;
        let row = EpochMetrics {
            epoch,
            seconds,
            loss_total: mean,
            loss_recon: None,
            loss_kl: None,
            loss_ctc: Some(mean),
            accuracy,
        };
        let mut tail_log = log.clone();
        tail_log.push(row.clone())?;
        checkpoint = Checkpoint::from_crnn(
            &crnn,
            TrainingMeta {
                epoch: epoch as u32,
                loss_tail: tail(&tail_log),
                rng: Rng::derive(config.seed, epoch as u64),
            },
        )?;
        finish_epoch(&mut log, row, &checkpoint, &opts)?;
    }
    Ok(TrainOutput {
        checkpoint,
        metrics: log,
        step_losses: steps,
    })
}
