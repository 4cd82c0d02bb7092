//! Staged training (streams, then integration), evaluation, gate analytics
//! and the ablation runner.

mod ablation;
mod checkpoint;
mod metrics;

pub use ablation::{ablation_suite, AblationReport, AblationRow, StreamCheckpoints, LAMBDA_SWEEP};
pub use checkpoint::{Checkpoint, RngState, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{
    gate_statistics_of, oracle_selection, top_k, write_gate_csv, write_gate_histogram, write_reports_csv, GateStats,
    MetricsReport, VideoPrediction,
};

use std::collections::HashMap;

use log::{debug, info};
use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::StreamKind;
use crate::config::Config;
use crate::data::{encode_bank, stack, ClipLoader, ClipPlan, FeatureBank, Inputs};
use crate::error::{Error, Result};
use crate::integrator::GateSource;
use crate::model::{is_stream_param, Model, ModelConfig, Variant};
use crate::nn::{Ctx, Module};
use crate::synth::VideoDescriptor;

/// Deterministic generator for a `(seed, purpose)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SGD with momentum and L2 weight decay (`v = mu*v + g + wd*w; w -= lr*v`).
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable parameter whose name passes `filter`.
    pub fn step(&mut self, model: &mut Model, lr: f64, filter: &dyn Fn(&str) -> bool) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable || !filter(name) {
                return;
            }
            let g = &p.grad + &(&p.value * wd);
            let v = velocity.entry(name.to_string()).or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            *v *= mu;
            *v += &g;
            p.value.scaled_add(-lr, v);
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_top1: f64,
}

/// Output of one training stage.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Loss of the very first batch, before any update.
    pub initial_loss: Option<f64>,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step, loss })
    }
}

fn build_model(cfg: &Config, model_cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    Model::new(
        model_cfg,
        &cfg.stream(StreamKind::Appearance),
        &cfg.stream(StreamKind::Pose),
        &cfg.integrator,
        rng,
    )
}

/// Clip-averaged predictions for every video of a bank.
pub fn predict_bank(model: &mut Model, bank: &FeatureBank) -> Result<Vec<VideoPrediction>> {
    let clips: Vec<usize> = (0..bank.num_clips()).collect();
    let mut per_clip = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(64) {
        let out = model.head_forward(&bank.gather(chunk), Ctx::EVAL)?;
        per_clip.extend(model.split_predictions(&out)?);
    }
    let n = bank.clips_per_video;
    Ok(per_clip
        .chunks(n)
        .zip(&bank.labels)
        .map(|(preds, &label)| {
            let mut probs = Array1::zeros(preds[0].video_probs.len());
            for p in preds {
                probs += &p.video_probs;
            }
            probs /= n as f64;
            let gate_mean = preds[0].gate.as_ref().map(|_| {
                preds.iter().map(|p| p.gate.as_ref().expect("gated").mean()).sum::<f64>() / n as f64
            });
            VideoPrediction {
                label,
                probs,
                gate_mean,
            }
        })
        .collect())
}

fn bank_top1(model: &mut Model, bank: &FeatureBank) -> Result<f64> {
    let preds = predict_bank(model, bank)?;
    let hits = preds.iter().filter(|p| p.top1() == p.label).count();
    Ok(100.0 * hits as f64 / preds.len().max(1) as f64)
}

/// Full-pipeline evaluation: `clips_per_video` evenly spaced clips per video,
/// probabilities averaged per video.
pub fn evaluate(model: &mut Model, cfg: &Config, videos: &[VideoDescriptor], clips_per_video: usize, name: &str, split: &str) -> Result<(MetricsReport, Vec<VideoPrediction>)> {
    let loader = ClipLoader::new(cfg);
    let bank = encode_bank(model, &loader, videos, &ClipPlan::Eval(clips_per_video), cfg.train.batch_size)?;
    let preds = predict_bank(model, &bank)?;
    Ok((MetricsReport::from_predictions(name, split, &preds, cfg.model.num_classes), preds))
}

/// Per-video gate means and their dataset statistics for a gated model.
pub fn gate_statistics(model: &mut Model, cfg: &Config, videos: &[VideoDescriptor]) -> Result<(GateStats, Vec<VideoPrediction>)> {
    if !model.variant().is_gated() {
        return Err(Error::Config(format!("variant {} has no gate", model.variant().name())));
    }
    let (_, preds) = evaluate(model, cfg, videos, cfg.sampling.eval_clips, "gate", "")?;
    Ok((gate_statistics_of(&preds, cfg.model.num_classes)?, preds))
}

/// Trains every parameter of `model` end to end on rendered clips.
#[allow(clippy::too_many_arguments)]
fn train_end_to_end(
    model: &mut Model,
    cfg: &Config,
    train: &[VideoDescriptor],
    val: &[VideoDescriptor],
    lr: f64,
    epochs: usize,
    decays: &[usize],
    lambda: f64,
    filter: &dyn Fn(&str) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Model, Vec<EpochLog>, Option<f64>, Option<usize>)> {
    let loader = ClipLoader::new(cfg);
    let inputs = Inputs::for_model(model);
    let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let mut best = model.clone();
    let mut best_top1 = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut initial = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        let lr_now = cfg.train.lr_at(lr, decays, epoch);
        order.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let clips = batch
                .iter()
                .map(|&i| loader.load_train(&train[i], rng, inputs))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
            let (a, p) = stack(&clips)?;
            model.zero_grad();
            let feats = model.encode(a.as_ref(), p.as_ref(), Ctx::TRAIN)?;
            let out = model.head_forward(&feats, Ctx::TRAIN)?;
            let (loss, dfeat) = model.loss_backward(&out, &labels, lambda)?;
            check_finite(loss, epoch, step)?;
            initial.get_or_insert(loss);
            model.encode_backward(&dfeat);
            sgd.step(model, lr_now, filter);
            total += loss;
            steps += 1;
        }
        let bank = encode_bank(model, &loader, val, &ClipPlan::Eval(cfg.train.select_clips), cfg.train.batch_size)?;
        let top1 = bank_top1(model, &bank)?;
        let mean_loss = total / steps.max(1) as f64;
        info!("epoch {epoch}: lr {lr_now:.2e} loss {mean_loss:.4} val top1 {top1:.1}");
        // ties go to the later, longer-trained epoch
        if top1 >= best_top1 {
            best_top1 = top1;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        history.push(EpochLog {
            epoch,
            lr: lr_now,
            mean_loss,
            val_top1: top1,
        });
    }
    Ok((best, history, initial, best_epoch))
}

/// Pre-trains one single-stream model on `L_cls`; the returned checkpoint
/// holds the epoch with the best validation top-1.
pub fn train_stream(kind: StreamKind, cfg: &Config, train: &[VideoDescriptor], val: &[VideoDescriptor]) -> Result<TrainRun> {
    cfg.validate()?;
    let salt = match kind {
        StreamKind::Appearance => 1,
        StreamKind::Pose => 2,
    };
    let mut rng = seeded_rng(cfg.train.seed, salt);
    let model_cfg = ModelConfig {
        variant: Variant::single_stream(kind),
        ..cfg.model.clone()
    };
    let mut model = build_model(cfg, model_cfg, &mut rng)?;
    let t = &cfg.train;
    let (best, history, initial, best_epoch) = train_end_to_end(
        &mut model,
        cfg,
        train,
        val,
        t.stream_lr,
        t.stream_epochs,
        &t.stream_decay_epochs,
        0.0,
        &|_| true,
        &mut rng,
    )?;
    let checkpoint = Checkpoint::from_model(&best, cfg, &format!("stream:{}", kind.name()), &rng)?
        .with_meta("epochs", t.stream_epochs)?
        .with_meta("best_epoch", best_epoch)?;
    Ok(TrainRun {
        checkpoint,
        initial_loss: initial,
        history,
        best_epoch,
    })
}

/// How the integration stage is run.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorOptions {
    pub variant: Variant,
    pub lambda: f64,
    pub gate_source: GateSource,
    /// Keep stream parameters fixed (train only the integrator and head).
    pub freeze: bool,
    /// Initialize the streams from the stream checkpoints.
    pub pretrain: bool,
}

impl IntegratorOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            variant: cfg.model.variant,
            lambda: cfg.model.lambda,
            gate_source: cfg.integrator.gate_source,
            freeze: true,
            pretrain: true,
        }
    }

    /// Configuration actually used for the run.
    pub fn apply(&self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        c.model.variant = self.variant;
        c.model.lambda = self.lambda;
        c.integrator.gate_source = self.gate_source;
        c
    }
}

/// Cached frozen-stream features shared by integration runs.
#[derive(Clone, Debug)]
pub struct StreamBanks {
    pub train: FeatureBank,
    pub val_in: FeatureBank,
    pub val_out: FeatureBank,
}

/// Builds a two-stream model whose streams come from the checkpoints.
pub fn load_streams(cfg: &Config, model_cfg: ModelConfig, streams: &StreamCheckpoints, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut model = build_model(cfg, model_cfg, rng)?;
    if model.appearance.is_some() {
        let a = streams.appearance.as_ref().ok_or(Error::Missing("appearance stream checkpoint (run train-stream --kind appearance)".into()))?;
        a.load_into(&mut model, |n| n.starts_with("appearance"))?;
    }
    if model.pose.is_some() {
        let p = streams.pose.as_ref().ok_or(Error::Missing("pose stream checkpoint (run train-stream --kind pose)".into()))?;
        p.load_into(&mut model, |n| n.starts_with("pose"))?;
    }
    Ok(model)
}

/// Encodes train (augmented), in-context and out-of-context banks with the
/// frozen streams of `model`.
pub fn build_banks(model: &mut Model, cfg: &Config, train: &[VideoDescriptor], val_in: &[VideoDescriptor], val_out: &[VideoDescriptor]) -> Result<StreamBanks> {
    let loader = ClipLoader::new(cfg);
    let b = cfg.train.batch_size;
    let plan = ClipPlan::Augmented {
        clips: cfg.train.cache_clips,
        seed: cfg.train.seed,
    };
    Ok(StreamBanks {
        train: encode_bank(model, &loader, train, &plan, b)?,
        val_in: encode_bank(model, &loader, val_in, &ClipPlan::Eval(cfg.sampling.eval_clips), b)?,
        val_out: encode_bank(model, &loader, val_out, &ClipPlan::Eval(cfg.sampling.eval_clips), b)?,
    })
}

/// Trains the integrator and classifier on top of pre-trained streams.
///
/// With `freeze` set, stream parameters and normalization statistics are
/// left bit-identical and training runs on cached features (`banks` if
/// given, otherwise encoded here).
pub fn train_integrator(
    cfg: &Config,
    streams: &StreamCheckpoints,
    train: &[VideoDescriptor],
    val_in: &[VideoDescriptor],
    opts: &IntegratorOptions,
    banks: Option<&StreamBanks>,
) -> Result<TrainRun> {
    let cfg = opts.apply(cfg);
    cfg.validate()?;
    if !opts.variant.has_joint_head() {
        return Err(Error::Config(format!("{} is not trained in the integration stage", opts.variant.name())));
    }
    let mut rng = seeded_rng(cfg.train.seed, 3);
    let mut model = if opts.pretrain {
        load_streams(&cfg, cfg.model.clone(), streams, &mut rng)?
    } else {
        build_model(&cfg, cfg.model.clone(), &mut rng)?
    };
    let stage = format!("integrator:{}", opts.variant.name());
    let t = &cfg.train;
    if !opts.freeze {
        let (best, history, initial, best_epoch) = train_end_to_end(
            &mut model,
            &cfg,
            train,
            val_in,
            t.integrator_lr,
            t.integrator_epochs,
            &t.integrator_decay_epochs,
            opts.lambda,
            &|_| true,
            &mut rng,
        )?;
        let checkpoint = Checkpoint::from_model(&best, &cfg, &stage, &rng)?
            .with_meta("freeze", false)?
            .with_meta("pretrain", opts.pretrain)?
            .with_meta("best_epoch", best_epoch)?;
        return Ok(TrainRun {
            checkpoint,
            initial_loss: initial,
            history,
            best_epoch,
        });
    }

    let owned;
    let banks = match banks {
        Some(b) if opts.pretrain => b,
        _ => {
            owned = build_banks(&mut model, &cfg, train, val_in, &[])?;
            &owned
        }
    };
    let head_only = |n: &str| !is_stream_param(n);
    let mut sgd = Sgd::new(t.momentum, t.weight_decay);
    let mut order: Vec<usize> = (0..banks.train.num_clips()).collect();
    let mut best = model.clone();
    let mut best_top1 = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut initial = None;
    for epoch in 0..t.integrator_epochs {
        let lr = t.lr_at(t.integrator_lr, &t.integrator_decay_epochs, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(t.batch_size).enumerate() {
            let feats = banks.train.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&c| banks.train.clip_label(c)).collect();
            model.zero_grad();
            let out = model.head_forward(&feats, Ctx::TRAIN)?;
            let (loss, _) = model.loss_backward(&out, &labels, opts.lambda)?;
            check_finite(loss, epoch, step)?;
            initial.get_or_insert(loss);
            sgd.step(&mut model, lr, &head_only);
            total += loss;
            steps += 1;
        }
        let top1 = bank_top1(&mut model, &banks.val_in)?;
        let mean_loss = total / steps.max(1) as f64;
        debug!("integrator epoch {epoch}: lr {lr:.2e} loss {mean_loss:.4} val top1 {top1:.1}");
        if top1 >= best_top1 {
            best_top1 = top1;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        history.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            val_top1: top1,
        });
    }
    let checkpoint = Checkpoint::from_model(&best, &cfg, &stage, &rng)?
        .with_meta("freeze", true)?
        .with_meta("pretrain", opts.pretrain)?
        .with_meta("best_epoch", best_epoch)?;
    Ok(TrainRun {
        checkpoint,
        initial_loss: initial,
        history,
        best_epoch,
    })
}
