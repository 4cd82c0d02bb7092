//! The single JSON configuration file and the presets built from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{StreamConfig, StreamKind};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::model::ModelConfig;
use crate::pose_codec::{CodecConfig, Skeleton};
use crate::sampling::{AppearanceNorm, AugmentConfig, ClipMode, ClipSpec};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Appearance frames per clip (`T`).
    pub frames: usize,
    /// Frame interval `tau` between sampled appearance frames.
    pub interval: usize,
    /// Clips averaged per video at evaluation time.
    pub eval_clips: usize,
    pub augment: AugmentConfig,
    pub norm: AppearanceNorm,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            interval: 6,
            eval_clips: 10,
            augment: AugmentConfig::default(),
            norm: AppearanceNorm::default(),
        }
    }
}

/// Architecture shared by both streams; input sizes come from the codec,
/// synth and sampling sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamsConfig {
    pub base_widths: Vec<usize>,
    pub width_multiplier: f64,
    pub blocks_per_stage: Vec<usize>,
    pub shift_fraction: f64,
    pub appearance_stem_kernel: usize,
    pub init_std: f64,
}

impl Default for StreamsConfig {
    fn default() -> Self {
        Self {
            base_widths: vec![64, 128, 256, 512],
            width_multiplier: 0.125,
            blocks_per_stage: vec![2, 2, 2, 2],
            shift_fraction: 0.125,
            appearance_stem_kernel: 7,
            init_std: 0.001,
        }
    }
}

impl StreamsConfig {
    pub fn stage_widths(&self) -> Vec<usize> {
        self.base_widths
            .iter()
            .map(|&w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stream_lr: f64,
    pub stream_epochs: usize,
    pub stream_decay_epochs: Vec<usize>,
    pub integrator_lr: f64,
    pub integrator_epochs: usize,
    pub integrator_decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Augmented clips per training video cached when the streams are
    /// frozen.
    pub cache_clips: usize,
    /// Clips per validation video used for best-epoch selection while
    /// training a stream.
    pub select_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            stream_lr: 1e-2,
            stream_epochs: 20,
            stream_decay_epochs: vec![12, 17],
            integrator_lr: 1e-3,
            integrator_epochs: 10,
            integrator_decay_epochs: vec![6, 9],
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            cache_clips: 4,
            select_clips: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stream_lr > 0.0 && self.integrator_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config("decay_factor must be > 1".into()));
        }
        if self.batch_size == 0 || self.cache_clips == 0 || self.select_clips == 0 {
            return Err(Error::Config("batch_size, cache_clips and select_clips must be >= 1".into()));
        }
        Ok(())
    }

    /// Step schedule: `base / factor^(number of decay epochs <= epoch)`.
    pub fn lr_at(&self, base: f64, decays: &[usize], epoch: usize) -> f64 {
        let n = decays.iter().filter(|&&d| d <= epoch).count();
        base / self.decay_factor.powi(n as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub codec: CodecConfig,
    pub sampling: SamplingConfig,
    pub streams: StreamsConfig,
    pub integrator: IntegratorConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Desk-scale defaults: 1/8-width streams, a 64-wide integrator, a wider
    /// stream init (without ImageNet weights the streams train poorly from
    /// sigma = 0.001), a shorter stream schedule and a faster integrator.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.integrator.common_width = 64;
        cfg.streams.init_std = 0.05;
        cfg.train.stream_epochs = 12;
        cfg.train.stream_decay_epochs = vec![8, 11];
        cfg.train.integrator_lr = 1e-2;
        cfg
    }

    /// Full-width streams (stage widths 64..512) and `C = 512`.
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.streams.width_multiplier = 1.0;
        cfg.integrator.common_width = 512;
        cfg.codec.heatmap_height = 56;
        cfg.codec.heatmap_width = 56;
        cfg.synth.pose_size = (56, 56);
        cfg.synth.appearance_size = (224, 224);
        cfg.model.pool_factor = 4;
        cfg.sampling.interval = 8;
        cfg.train.batch_size = 32;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if (self.codec.heatmap_height, self.codec.heatmap_width) != self.synth.pose_size {
            return Err(Error::Config("codec heatmap size must equal synth.pose_size".into()));
        }
        if self.model.num_classes != self.synth.num_classes {
            return Err(Error::Config("model.num_classes must equal synth.num_classes".into()));
        }
        ClipSpec::new(self.sampling.frames, self.sampling.interval, ClipMode::TrainRandomStart)?;
        self.stream(StreamKind::Appearance).validate()?;
        self.stream(StreamKind::Pose).validate()
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::stick_figure()
    }

    pub fn stream(&self, kind: StreamKind) -> StreamConfig {
        let s = &self.streams;
        let (input_channels, spatial_in, frames, stem_kernel) = match kind {
            StreamKind::Appearance => (3, self.synth.appearance_size, self.sampling.frames, s.appearance_stem_kernel),
            StreamKind::Pose => (
                self.skeleton().num_channels(),
                (self.codec.heatmap_height, self.codec.heatmap_width),
                self.sampling.frames * self.model.pool_factor,
                3,
            ),
        };
        StreamConfig {
            kind,
            stage_widths: s.stage_widths(),
            blocks_per_stage: s.blocks_per_stage.clone(),
            shift_fraction: s.shift_fraction,
            input_channels,
            spatial_in,
            frames,
            stem_kernel,
            init_std: s.init_std,
        }
    }

    /// Interval between sampled pose frames; the pose stream sees
    /// `pool_factor` times as many frames over the same span.
    pub fn pose_interval(&self) -> usize {
        (self.sampling.interval / self.model.pool_factor).max(1)
    }
}
