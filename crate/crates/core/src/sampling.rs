//! Clip sampling and paired geometric augmentation.
//!
//! A single [`AugmentSpec`] is drawn per clip and applied to both the RGB
//! frames and the keypoints, so the two streams always see the same
//! geometry.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_codec::{flip_pose_frame, PoseFrame, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    TrainRandomStart,
    EvalUniformStarts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    /// Frames per clip (`T`).
    pub frames: usize,
    /// Stride between sampled frames (`tau`).
    pub interval: usize,
    pub mode: ClipMode,
}

impl ClipSpec {
    pub fn new(frames: usize, interval: usize, mode: ClipMode) -> Result<Self> {
        if frames == 0 || interval == 0 {
            return Err(Error::Config("clip frames and interval must be >= 1".into()));
        }
        Ok(Self {
            frames,
            interval,
            mode,
        })
    }
}

/// Frame indices `start + i * interval`, wrapped modulo `video_len`.
///
/// In train mode a missing `start` is drawn uniformly from the video; in eval
/// mode it defaults to 0 and callers pass the values from
/// [`eval_clip_starts`].
pub fn sample_clip_indices<R: Rng + ?Sized>(
    video_len: usize,
    spec: &ClipSpec,
    rng: &mut R,
    start: Option<usize>,
) -> Result<Vec<usize>> {
    if video_len == 0 {
        return Err(Error::Empty("video has no frames"));
    }
    let start = match (start, spec.mode) {
        (Some(s), _) => s,
        (None, ClipMode::TrainRandomStart) => rng.random_range(0..video_len),
        (None, ClipMode::EvalUniformStarts) => 0,
    };
    Ok((0..spec.frames)
        .map(|i| (start + i * spec.interval) % video_len)
        .collect())
}

/// `n` clip starts spread evenly over the video: `floor(i * len / n)`.
pub fn eval_clip_starts(video_len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * video_len / n.max(1)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum translation as a fraction of frame width/height.
    pub max_translate: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.8,
            scale_max: 1.25,
            max_translate: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            max_translate: 0.0,
            flip_prob: 0.0,
        }
    }
}

/// Geometric transform for one clip: scale about the frame center, then
/// translate (pixels), then optionally mirror.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub scale: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub hflip: bool,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
            hflip: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Same transform expressed on a canvas `ratio` times the size.
    pub fn rescaled(&self, ratio: f64) -> Self {
        Self {
            translate_x: self.translate_x * ratio,
            translate_y: self.translate_y * ratio,
            ..*self
        }
    }
}

/// Draws a spec for a `width x height` frame.
pub fn make_augment_spec<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
) -> AugmentSpec {
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let mut shift = |extent: usize| {
        let m = cfg.max_translate * extent as f64;
        if m > 0.0 {
            rng.random_range(-m..m)
        } else {
            0.0
        }
    };
    let translate_x = shift(width);
    let translate_y = shift(height);
    let hflip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));
    AugmentSpec {
        scale,
        translate_x,
        translate_y,
        hflip,
    }
}

/// RGB frames, shape `T x 3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceClip {
    pub data: Array4<f64>,
}

impl AppearanceClip {
    pub fn num_frames(&self) -> usize {
        self.data.dim().0
    }
}

/// Per-channel standardization applied after scaling RGB into [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AppearanceNorm {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl AppearanceNorm {
    pub fn apply(&self, clip: &mut AppearanceClip) {
        for (c, mut plane) in clip.data.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
    }
}

fn bilinear_zero(img: &ArrayView3<f64>, c: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = img.dim();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if wx * wy == 0.0 || xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            acc += wx * wy * img[[c, yi as usize, xi as usize]];
        }
    }
    acc
}

/// In-bounds bilinear taps `(index, weight)` for a source coordinate.
fn taps(v: f64, n: usize) -> Vec<(usize, f64)> {
    let v0 = v.floor();
    let f = v - v0;
    [(v0, 1.0 - f), (v0 + 1.0, f)]
        .into_iter()
        .filter(|&(i, wt)| wt != 0.0 && i >= 0.0 && i < n as f64)
        .map(|(i, wt)| (i as usize, wt))
        .collect()
}

/// Bilinear resize of one `C x H x W` frame.
pub fn resize_frame(frame: ArrayView3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, h, w) = frame.dim();
    if (h, w) == (height, width) {
        return frame.to_owned();
    }
    let (sy, sx) = (h as f64 / height as f64, w as f64 / width as f64);
    Array3::from_shape_fn((c, height, width), |(ch, y, x)| {
        let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        bilinear_zero(&frame, ch, src_x, src_y)
    })
}

/// Applies `spec` to every frame. Out-of-frame samples are zero; the flip
/// is an exact column reversal.
pub fn apply_augment_appearance(clip: &AppearanceClip, spec: &AugmentSpec) -> AppearanceClip {
    let (t, c, h, w) = clip.data.dim();
    let geometric = spec.scale != 1.0 || spec.translate_x != 0.0 || spec.translate_y != 0.0;
    let mut out = if geometric {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        // the transform is axis-aligned, so bilinear taps separate into rows and columns
        let cols: Vec<_> = (0..w).map(|x| taps(cx + (x as f64 - spec.translate_x - cx) / spec.scale, w)).collect();
        let rows: Vec<_> = (0..h).map(|y| taps(cy + (y as f64 - spec.translate_y - cy) / spec.scale, h)).collect();
        let src = clip.data.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = vec![0.0; t * c * h * w];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
            for (y, row) in rows.iter().enumerate() {
                for (x, col) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(yi, wy) in row {
                        for &(xi, wx) in col {
                            acc += wx * wy * plane[yi * w + xi];
                        }
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
        Array4::from_shape_vec((t, c, h, w), out).expect("shape")
    } else {
        clip.data.clone()
    };
    if spec.hflip {
        out.invert_axis(Axis(3));
        out = out.as_standard_layout().into_owned();
    }
    AppearanceClip { data: out }
}

/// Moves keypoints through the same transform on a `width x height` pose
/// canvas. `spec` must already be rescaled to pose pixels.
pub fn apply_augment_pose(
    frames: &[PoseFrame],
    spec: &AugmentSpec,
    skeleton: &Skeleton,
    width: usize,
    height: usize,
) -> Vec<PoseFrame> {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    frames
        .iter()
        .map(|frame| {
            let mut moved = frame.clone();
            if spec.scale != 1.0 || spec.translate_x != 0.0 || spec.translate_y != 0.0 {
                for kp in moved.persons.iter_mut().flat_map(|p| p.keypoints.iter_mut()) {
                    kp.x = cx + spec.scale * (kp.x - cx) + spec.translate_x;
                    kp.y = cy + spec.scale * (kp.y - cy) + spec.translate_y;
                }
            }
            if spec.hflip {
                moved = flip_pose_frame(&moved, skeleton, width);
            }
            moved
        })
        .collect()
}
