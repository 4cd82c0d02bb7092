//! Full classifier assembly: streams, integration variants, per-frame
//! classification and the composite loss.

use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_clips, pool_rows, pool_rows_backward, FeatureSeq, Stream, StreamConfig, StreamKind};
use crate::error::{shape_err, Error, Result};
use crate::integrator::{gate_penalty, GateMatrix, Integrator, IntegratorConfig};
use crate::nn::{join, Ctx, Linear, Module, Param};
use crate::pose_codec::PoseTensorClip;
use crate::sampling::AppearanceClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Integral,
    AppearanceOnly,
    PoseOnly,
    FeatureFuse,
    NoGate,
    ScoreAverage,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Integral,
        Variant::AppearanceOnly,
        Variant::PoseOnly,
        Variant::FeatureFuse,
        Variant::NoGate,
        Variant::ScoreAverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Integral => "integral",
            Variant::AppearanceOnly => "appearance_only",
            Variant::PoseOnly => "pose_only",
            Variant::FeatureFuse => "feature_fuse",
            Variant::NoGate => "no_gate",
            Variant::ScoreAverage => "score_average",
        }
    }

    pub fn uses_appearance(self) -> bool {
        self != Variant::PoseOnly
    }

    pub fn uses_pose(self) -> bool {
        self != Variant::AppearanceOnly
    }

    pub fn is_gated(self) -> bool {
        self == Variant::Integral
    }

    /// Variants with a single classifier over combined features.
    pub fn has_joint_head(self) -> bool {
        matches!(self, Variant::Integral | Variant::FeatureFuse | Variant::NoGate)
    }

    pub fn single_stream(kind: StreamKind) -> Self {
        match kind {
            StreamKind::Appearance => Variant::AppearanceOnly,
            StreamKind::Pose => Variant::PoseOnly,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub num_classes: usize,
    /// Temporal pooling factor applied to pose features so they match the
    /// appearance frame rate.
    pub pool_factor: usize,
    /// Appearance weight `w` of the score-average baseline.
    pub score_weight: f64,
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Integral,
            lambda: 1.5,
            num_classes: 8,
            pool_factor: 1,
            score_weight: 0.5,
            head_init_std: 0.001,
        }
    }
}

impl ModelConfig {
    pub const LAMBDA_WEAK: f64 = 1.5;
    pub const LAMBDA_STRONG: f64 = 5.0;

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.pool_factor == 0 {
            return Err(Error::Config("pool_factor must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_weight) {
            return Err(Error::Config("score_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Output for one clip (or, after averaging, one video).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub video_probs: Array1<f64>,
    pub per_frame_probs: Array2<f64>,
    pub gate: Option<GateMatrix>,
}

impl Prediction {
    pub fn top1(&self) -> usize {
        argmax(&self.video_probs)
    }
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Per-frame affine map followed by a softmax over classes.
pub fn classify_frames(f: &FeatureSeq, head: &Linear) -> Result<Array2<f64>> {
    let mut head = head.clone();
    let z = head.forward(f.data.view(), Ctx::EVAL)?;
    Ok(softmax_rows(&z))
}

/// Mean of the per-frame class distributions.
pub fn aggregate_probs(per_frame: &Array2<f64>) -> Result<Array1<f64>> {
    per_frame.mean_axis(Axis(0)).ok_or(Error::Empty("no frames to aggregate"))
}

pub fn cross_entropy(probs: &Array1<f64>, label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

/// `CE(video_probs, label) + lambda * gate_regularizer(gate)`; the gate term
/// is dropped for gateless predictions.
pub fn composite_loss(pred: &Prediction, label: usize, lambda: f64) -> f64 {
    let ce = cross_entropy(&pred.video_probs, label);
    match &pred.gate {
        Some(g) if lambda != 0.0 => ce + lambda * gate_penalty(&g.data),
        _ => ce,
    }
}

/// `w * pred_a + (1 - w) * pred_p` on both the video and per-frame
/// distributions.
pub fn score_average(pred_a: &Prediction, pred_p: &Prediction, w: f64) -> Result<Prediction> {
    if pred_a.video_probs.len() != pred_p.video_probs.len() {
        return Err(shape_err("score average classes", pred_a.video_probs.len(), pred_p.video_probs.len()));
    }
    let per_frame_probs = if pred_a.per_frame_probs.dim() == pred_p.per_frame_probs.dim() {
        &pred_a.per_frame_probs * w + &(&pred_p.per_frame_probs * (1.0 - w))
    } else {
        let v = &pred_a.video_probs * w + &(&pred_p.video_probs * (1.0 - w));
        v.insert_axis(Axis(0))
    };
    Ok(Prediction {
        video_probs: blend(&pred_a.video_probs, &pred_p.video_probs, w),
        per_frame_probs,
        gate: None,
    })
}

fn blend(a: &Array1<f64>, p: &Array1<f64>, w: f64) -> Array1<f64> {
    if w == 1.0 {
        a.clone()
    } else if w == 0.0 {
        p.clone()
    } else {
        a * w + &(p * (1.0 - w))
    }
}

/// Mean video-level cross entropy over a batch and its gradient w.r.t. the
/// per-frame logits. `probs` holds `N * frames` softmax rows.
pub fn video_ce_and_grad(probs: &Array2<f64>, labels: &[usize], frames: usize) -> Result<(f64, Array2<f64>)> {
    let (rows, k) = probs.dim();
    if rows != labels.len() * frames || frames == 0 {
        return Err(shape_err("loss rows", labels.len() * frames, rows));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, k));
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(shape_err("label", format!("< {k}"), y));
        }
        let block = probs.slice(s![i * frames..(i + 1) * frames, ..]);
        let pbar = block.column(y).sum() / frames as f64;
        loss -= pbar.max(f64::MIN_POSITIVE).ln();
        let scale = -1.0 / (n * frames as f64 * pbar.max(f64::MIN_POSITIVE));
        for t in 0..frames {
            let row = block.row(t);
            let pty = row[y];
            for c in 0..k {
                let delta = if c == y { 1.0 } else { 0.0 };
                grad[[i * frames + t, c]] = scale * pty * (delta - row[c]);
            }
        }
    }
    Ok((loss / n, grad))
}

/// Stream outputs for a batch; pose rows are already temporally pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub fa: Option<Array2<f64>>,
    pub fp: Option<Array2<f64>>,
}

/// Head-side output for a batch of clips.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Per-frame class distributions, `N * T` rows.
    pub probs: Array2<f64>,
    pub gate: Option<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub appearance: Option<Stream>,
    pub pose: Option<Stream>,
    pub appearance_head: Option<Linear>,
    pub pose_head: Option<Linear>,
    pub integrator: Option<Integrator>,
    pub head: Option<Linear>,
    frames: usize,
    fuse_split: usize,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        app_cfg: &StreamConfig,
        pose_cfg: &StreamConfig,
        integ_cfg: &IntegratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let k = cfg.num_classes;
        if v.uses_appearance() && v.uses_pose() && pose_cfg.frames != app_cfg.frames * cfg.pool_factor {
            return Err(Error::Config(format!(
                "pose stream frames ({}) must equal appearance frames ({}) x pool_factor ({})",
                pose_cfg.frames, app_cfg.frames, cfg.pool_factor
            )));
        }
        if pose_cfg.frames % cfg.pool_factor != 0 {
            return Err(Error::Config("pose frames must be divisible by pool_factor".into()));
        }
        let frames = if v.uses_appearance() { app_cfg.frames } else { pose_cfg.frames / cfg.pool_factor };
        let appearance = v.uses_appearance().then(|| Stream::new(app_cfg.clone(), rng)).transpose()?;
        let pose = v.uses_pose().then(|| Stream::new(pose_cfg.clone(), rng)).transpose()?;
        let c_a = app_cfg.out_channels();
        let c_p = pose_cfg.out_channels();
        let std = cfg.head_init_std;
        let single = matches!(v, Variant::AppearanceOnly | Variant::ScoreAverage);
        let appearance_head = single.then(|| Linear::new(c_a, k, std, rng));
        let single = matches!(v, Variant::PoseOnly | Variant::ScoreAverage);
        let pose_head = single.then(|| Linear::new(c_p, k, std, rng));
        let integrator = matches!(v, Variant::Integral | Variant::NoGate)
            .then(|| Integrator::new(integ_cfg.clone(), c_a, c_p, v.is_gated(), rng))
            .transpose()?;
        let head = match v {
            Variant::Integral | Variant::NoGate => Some(Linear::new(integ_cfg.common_width, k, std, rng)),
            Variant::FeatureFuse => Some(Linear::new(c_a + c_p, k, std, rng)),
            _ => None,
        };
        Ok(Self {
            cfg,
            appearance,
            pose,
            appearance_head,
            pose_head,
            integrator,
            head,
            frames,
            fuse_split: c_a,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Frames per clip after temporal pooling.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Runs the streams on stacked batches (`(C, N*T, H, W)` layout).
    pub fn encode(&mut self, app: Option<&Array4<f64>>, pose: Option<&Array4<f64>>, ctx: Ctx) -> Result<Features> {
        let fa = match &mut self.appearance {
            Some(s) => Some(s.forward(app.ok_or(Error::Missing("appearance input".into()))?, ctx)?),
            None => None,
        };
        let fp = match &mut self.pose {
            Some(s) => {
                let raw = s.forward(pose.ok_or(Error::Missing("pose input".into()))?, ctx)?;
                Some(pool_rows(&raw, self.cfg.pool_factor)?)
            }
            None => None,
        };
        Ok(Features { fa, fp })
    }

    /// Backpropagates feature gradients into the stream parameters.
    pub fn encode_backward(&mut self, d: &Features) {
        if let (Some(s), Some(g)) = (&mut self.appearance, &d.fa) {
            s.backward(g);
        }
        if let (Some(s), Some(g)) = (&mut self.pose, &d.fp) {
            s.backward(&pool_rows_backward(g, self.cfg.pool_factor));
        }
    }

    fn need<'a>(f: &'a Option<Array2<f64>>, what: &str) -> Result<&'a Array2<f64>> {
        f.as_ref().ok_or_else(|| Error::Missing(format!("{what} features")))
    }

    pub fn head_forward(&mut self, feats: &Features, ctx: Ctx) -> Result<HeadOutput> {
        let missing = |what: &str| Error::Missing(format!("{what} head"));
        match self.cfg.variant {
            Variant::AppearanceOnly => {
                let fa = Self::need(&feats.fa, "appearance")?;
                let z = self.appearance_head.as_mut().ok_or_else(|| missing("appearance"))?.forward(fa.view(), ctx)?;
                Ok(HeadOutput { probs: softmax_rows(&z), gate: None })
            }
            Variant::PoseOnly => {
                let fp = Self::need(&feats.fp, "pose")?;
                let z = self.pose_head.as_mut().ok_or_else(|| missing("pose"))?.forward(fp.view(), ctx)?;
                Ok(HeadOutput { probs: softmax_rows(&z), gate: None })
            }
            Variant::ScoreAverage => {
                let fa = Self::need(&feats.fa, "appearance")?;
                let fp = Self::need(&feats.fp, "pose")?;
                let pa = softmax_rows(&self.appearance_head.as_mut().ok_or_else(|| missing("appearance"))?.forward(fa.view(), ctx)?);
                let pp = softmax_rows(&self.pose_head.as_mut().ok_or_else(|| missing("pose"))?.forward(fp.view(), ctx)?);
                let w = self.cfg.score_weight;
                let probs = if w == 1.0 {
                    pa
                } else if w == 0.0 {
                    pp
                } else {
                    pa * w + &(pp * (1.0 - w))
                };
                Ok(HeadOutput { probs, gate: None })
            }
            Variant::FeatureFuse => {
                let fa = Self::need(&feats.fa, "appearance")?;
                let fp = Self::need(&feats.fp, "pose")?;
                if fa.nrows() != fp.nrows() {
                    return Err(shape_err("fused frame rows", fa.nrows(), fp.nrows()));
                }
                let x = concatenate![Axis(1), *fa, *fp];
                let z = self.head.as_mut().ok_or_else(|| missing("fused"))?.forward(x.view(), ctx)?;
                Ok(HeadOutput { probs: softmax_rows(&z), gate: None })
            }
            Variant::Integral | Variant::NoGate => {
                let fa = Self::need(&feats.fa, "appearance")?;
                let fp = Self::need(&feats.fp, "pose")?;
                let integ = self.integrator.as_mut().ok_or(Error::Missing("integrator".into()))?;
                let out = integ.forward(fa, fp, ctx)?;
                let z = self.head.as_mut().ok_or_else(|| missing("fused"))?.forward(out.fused.view(), ctx)?;
                Ok(HeadOutput { probs: softmax_rows(&z), gate: out.gate })
            }
        }
    }

    /// Backward from per-frame logit gradients (and an optional direct gate
    /// gradient) to the stream features.
    pub fn head_backward(&mut self, dlogits: &Array2<f64>, dgate: Option<&Array2<f64>>) -> Result<Features> {
        match self.cfg.variant {
            Variant::AppearanceOnly => {
                let d = self.appearance_head.as_mut().expect("head").backward(dlogits.view());
                Ok(Features { fa: Some(d), fp: None })
            }
            Variant::PoseOnly => {
                let d = self.pose_head.as_mut().expect("head").backward(dlogits.view());
                Ok(Features { fa: None, fp: Some(d) })
            }
            Variant::FeatureFuse => {
                let d = self.head.as_mut().expect("head").backward(dlogits.view());
                Ok(Features {
                    fa: Some(d.slice(s![.., ..self.fuse_split]).to_owned()),
                    fp: Some(d.slice(s![.., self.fuse_split..]).to_owned()),
                })
            }
            Variant::Integral | Variant::NoGate => {
                let dfused = self.head.as_mut().expect("head").backward(dlogits.view());
                let (da, dp) = self.integrator.as_mut().expect("integrator").backward(&dfused, dgate);
                Ok(Features { fa: Some(da), fp: Some(dp) })
            }
            Variant::ScoreAverage => Err(Error::Config("score_average is an evaluation-only combination".into())),
        }
    }

    /// Batch loss `mean_n(CE_n + lambda * L_gate,n)` and its backward pass
    /// down to the stream features.
    pub fn loss_backward(&mut self, out: &HeadOutput, labels: &[usize], lambda: f64) -> Result<(f64, Features)> {
        let (ce, dlogits) = video_ce_and_grad(&out.probs, labels, self.frames)?;
        let (loss, dgate) = match &out.gate {
            Some(g) if lambda != 0.0 => {
                // per-clip mean, then batch mean == mean over all entries
                let n = g.len() as f64;
                (ce + lambda * gate_penalty(g), Some(g.mapv(|v| lambda / ((1.0 - v) * n))))
            }
            _ => (ce, None),
        };
        let dfeat = self.head_backward(&dlogits, dgate.as_ref())?;
        Ok((loss, dfeat))
    }

    /// Splits a batch head output into per-clip predictions.
    pub fn split_predictions(&self, out: &HeadOutput) -> Result<Vec<Prediction>> {
        let t = self.frames;
        let rows = out.probs.nrows();
        if rows % t != 0 {
            return Err(shape_err("prediction rows", format!("multiple of {t}"), rows));
        }
        (0..rows / t)
            .map(|i| {
                let per_frame_probs = out.probs.slice(s![i * t..(i + 1) * t, ..]).to_owned();
                let gate = match &out.gate {
                    Some(g) => Some(GateMatrix {
                        data: g.slice(s![i * t..(i + 1) * t, ..]).to_owned(),
                    }),
                    None => None,
                };
                Ok(Prediction {
                    video_probs: aggregate_probs(&per_frame_probs)?,
                    per_frame_probs,
                    gate,
                })
            })
            .collect()
    }

    /// Single-clip forward pass. `training` selects batch statistics in the
    /// normalization layers.
    pub fn forward(&mut self, app: &AppearanceClip, pose: &PoseTensorClip, training: bool) -> Result<Prediction> {
        let ctx = if training { Ctx::TRAIN } else { Ctx::EVAL };
        let a = self.cfg.variant.uses_appearance().then(|| batch_clips(&[&app.data])).transpose()?;
        let p = self.cfg.variant.uses_pose().then(|| batch_clips(&[&pose.data])).transpose()?;
        let feats = self.encode(a.as_ref(), p.as_ref(), ctx)?;
        let out = self.head_forward(&feats, ctx)?;
        Ok(self.split_predictions(&out)?.remove(0))
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(s) = &self.appearance {
            s.visit(&join(prefix, "appearance"), f);
        }
        if let Some(h) = &self.appearance_head {
            h.visit(&join(prefix, "appearance_head"), f);
        }
        if let Some(s) = &self.pose {
            s.visit(&join(prefix, "pose"), f);
        }
        if let Some(h) = &self.pose_head {
            h.visit(&join(prefix, "pose_head"), f);
        }
        if let Some(i) = &self.integrator {
            i.visit(&join(prefix, "integrator"), f);
        }
        if let Some(h) = &self.head {
            h.visit(&join(prefix, "head"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(s) = &mut self.appearance {
            s.visit_mut(&join(prefix, "appearance"), f);
        }
        if let Some(h) = &mut self.appearance_head {
            h.visit_mut(&join(prefix, "appearance_head"), f);
        }
        if let Some(s) = &mut self.pose {
            s.visit_mut(&join(prefix, "pose"), f);
        }
        if let Some(h) = &mut self.pose_head {
            h.visit_mut(&join(prefix, "pose_head"), f);
        }
        if let Some(i) = &mut self.integrator {
            i.visit_mut(&join(prefix, "integrator"), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_mut(&join(prefix, "head"), f);
        }
    }
}

/// Parameters owned by a backbone stream (not its classifier).
pub fn is_stream_param(name: &str) -> bool {
    name.starts_with("appearance.") || name.starts_with("pose.")
}
