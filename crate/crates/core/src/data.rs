//! Clip loading from synthetic videos and cached stream features.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use crate::backbone::batch_clips;
use crate::config::Config;
use crate::error::Result;
use crate::model::{Features, Model};
use crate::nn::Ctx;
use crate::pose_codec::{encode_pose_clip, PoseTensorClip, Skeleton};
use crate::sampling::{
    apply_augment_appearance, apply_augment_pose, eval_clip_starts, make_augment_spec, sample_clip_indices,
    AppearanceClip, AugmentSpec, ClipMode, ClipSpec,
};
use crate::synth::{VideoDescriptor, VideoSource};

/// Which inputs a loader should render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inputs {
    pub appearance: bool,
    pub pose: bool,
}

impl Inputs {
    pub const BOTH: Inputs = Inputs {
        appearance: true,
        pose: true,
    };

    pub fn for_model(model: &Model) -> Self {
        Self {
            appearance: model.appearance.is_some(),
            pose: model.pose.is_some(),
        }
    }
}

/// One loaded clip; inputs that were not requested are `None`.
#[derive(Clone, Debug)]
pub struct Clip {
    pub appearance: Option<AppearanceClip>,
    pub pose: Option<PoseTensorClip>,
    pub label: usize,
}

/// Renders, augments and encodes clips of synthetic videos.
#[derive(Clone, Debug)]
pub struct ClipLoader {
    cfg: Config,
    skeleton: Skeleton,
}

impl ClipLoader {
    pub fn new(cfg: &Config) -> Self {
        Self {
            cfg: cfg.clone(),
            skeleton: cfg.skeleton(),
        }
    }

    /// Loads the clip starting at frame `start`, with an optional augmentation
    /// (expressed in appearance pixels).
    pub fn load(&self, video: &VideoDescriptor, start: usize, augment: Option<&AugmentSpec>, inputs: Inputs) -> Result<Clip> {
        let src = VideoSource::from_descriptor(video, &self.cfg.synth)?;
        let len = src.len();
        let mut unused = crate::train_eval::seeded_rng(0, 0);
        let appearance = if inputs.appearance {
            let spec = ClipSpec::new(self.cfg.sampling.frames, self.cfg.sampling.interval, ClipMode::EvalUniformStarts)?;
            let idx = sample_clip_indices(len, &spec, &mut unused, Some(start))?;
            let (h, w) = self.cfg.synth.appearance_size;
            let mut data = Array4::zeros((idx.len(), 3, h, w));
            for (i, &f) in idx.iter().enumerate() {
                data.slice_mut(s![i, .., .., ..]).assign(&src.appearance_frame(f));
            }
            let mut clip = AppearanceClip { data };
            if let Some(a) = augment.filter(|a| !a.is_identity()) {
                clip = apply_augment_appearance(&clip, a);
            }
            self.cfg.sampling.norm.apply(&mut clip);
            Some(clip)
        } else {
            None
        };
        let pose = if inputs.pose {
            let frames = self.cfg.sampling.frames * self.cfg.model.pool_factor;
            let spec = ClipSpec::new(frames, self.cfg.pose_interval(), ClipMode::EvalUniformStarts)?;
            let idx = sample_clip_indices(len, &spec, &mut unused, Some(start))?;
            let mut poses: Vec<_> = idx.iter().map(|&f| src.pose_frame(f)).collect();
            if let Some(a) = augment.filter(|a| !a.is_identity()) {
                let (hp, wp) = self.cfg.synth.pose_size;
                let ratio = wp as f64 / self.cfg.synth.appearance_size.1 as f64;
                poses = apply_augment_pose(&poses, &a.rescaled(ratio), &self.skeleton, wp, hp);
            }
            Some(encode_pose_clip(&poses, &self.skeleton, &self.cfg.codec)?)
        } else {
            None
        };
        Ok(Clip {
            appearance,
            pose,
            label: video.action,
        })
    }

    /// A training clip: random start and random augmentation.
    pub fn load_train<R: Rng + ?Sized>(&self, video: &VideoDescriptor, rng: &mut R, inputs: Inputs) -> Result<Clip> {
        let start = rng.random_range(0..self.cfg.synth.frames_per_video);
        let (h, w) = self.cfg.synth.appearance_size;
        let spec = make_augment_spec(rng, &self.cfg.sampling.augment, w, h);
        self.load(video, start, Some(&spec), inputs)
    }
}

/// Stacks loaded clips into stream batches.
pub fn stack(clips: &[Clip]) -> Result<(Option<Array4<f64>>, Option<Array4<f64>>)> {
    let app: Vec<_> = clips.iter().filter_map(|c| c.appearance.as_ref().map(|a| &a.data)).collect();
    let pose: Vec<_> = clips.iter().filter_map(|c| c.pose.as_ref().map(|p| &p.data)).collect();
    Ok((
        (!app.is_empty()).then(|| batch_clips(&app)).transpose()?,
        (!pose.is_empty()).then(|| batch_clips(&pose)).transpose()?,
    ))
}

/// Stream features of many clips, stored contiguously: clip `j` owns rows
/// `j*T .. (j+1)*T`. Clips of one video are adjacent.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub frames: usize,
    pub clips_per_video: usize,
    /// Action label per video.
    pub labels: Vec<usize>,
    pub fa: Option<Array2<f64>>,
    pub fp: Option<Array2<f64>>,
}

impl FeatureBank {
    pub fn num_clips(&self) -> usize {
        self.labels.len() * self.clips_per_video
    }

    /// Features of the given clips, in order.
    pub fn gather(&self, clips: &[usize]) -> Features {
        let t = self.frames;
        let pick = |m: &Option<Array2<f64>>| {
            m.as_ref().map(|m| {
                let rows: Vec<usize> = clips.iter().flat_map(|&c| c * t..(c + 1) * t).collect();
                m.select(Axis(0), &rows)
            })
        };
        Features {
            fa: pick(&self.fa),
            fp: pick(&self.fp),
        }
    }

    pub fn clip_label(&self, clip: usize) -> usize {
        self.labels[clip / self.clips_per_video]
    }

    /// Keeps only the requested stream.
    pub fn restrict(&self, appearance: bool, pose: bool) -> FeatureBank {
        FeatureBank {
            fa: if appearance { self.fa.clone() } else { None },
            fp: if pose { self.fp.clone() } else { None },
            ..self.clone()
        }
    }
}

/// Where the clips of each video start and how they are augmented.
#[derive(Clone, Debug)]
pub enum ClipPlan {
    /// Evenly spaced starts, no augmentation.
    Eval(usize),
    /// Random starts and augmentations drawn from the given seed.
    Augmented { clips: usize, seed: u64 },
}

/// Runs the model's streams (eval mode) over every clip of `videos`.
pub fn encode_bank(model: &mut Model, loader: &ClipLoader, videos: &[VideoDescriptor], plan: &ClipPlan, batch: usize) -> Result<FeatureBank> {
    let inputs = Inputs::for_model(model);
    let frames_per_video = loader.cfg.synth.frames_per_video;
    let mut rng = match plan {
        ClipPlan::Augmented { seed, .. } => Some(crate::train_eval::seeded_rng(*seed, 7)),
        ClipPlan::Eval(_) => None,
    };
    let clips_per_video = match plan {
        ClipPlan::Eval(n) => *n,
        ClipPlan::Augmented { clips, .. } => *clips,
    };
    let starts = eval_clip_starts(frames_per_video, clips_per_video);
    let mut jobs = Vec::with_capacity(videos.len() * clips_per_video);
    for v in videos {
        for &s in &starts {
            jobs.push((v, s));
        }
    }
    let mut fa_parts = Vec::new();
    let mut fp_parts = Vec::new();
    for chunk in jobs.chunks(batch.max(1)) {
        let clips = chunk
            .iter()
            .map(|&(v, s)| match rng.as_mut() {
                Some(r) => loader.load_train(v, r, inputs),
                None => loader.load(v, s, None, inputs),
            })
            .collect::<Result<Vec<_>>>()?;
        let (a, p) = stack(&clips)?;
        let f = model.encode(a.as_ref(), p.as_ref(), Ctx::EVAL)?;
        fa_parts.extend(f.fa);
        fp_parts.extend(f.fp);
    }
    let cat = |parts: Vec<Array2<f64>>| -> Option<Array2<f64>> {
        if parts.is_empty() {
            return None;
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Some(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    };
    Ok(FeatureBank {
        frames: model.frames(),
        clips_per_video,
        labels: videos.iter().map(|v| v.action).collect(),
        fa: cat(fa_parts),
        fp: cat(fp_parts),
    })
}
