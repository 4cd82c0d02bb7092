//! Procedural stick-figure action videos with a controllable context cue.
//!
//! The action label is always carried by the figure's motion. The rendered
//! background (a class-keyed tint plus a striped texture patch) is the
//! context: it matches the action in-context and is deranged
//! out-of-context. Frames are rendered on demand from `(descriptor, frame)`
//! so datasets never need to be materialized.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::{s, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::pose_codec::{read_u32, Keypoint, PersonPose, PoseFrame, Skeleton};

pub const VIDEO_MAGIC: &[u8; 4] = b"AVC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    Matched,
    Derangement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub frames_per_video: usize,
    /// Appearance frame `(height, width)`.
    pub appearance_size: (usize, usize),
    /// Pose canvas `(height, width)`.
    pub pose_size: (usize, usize),
    /// Pose jitter standard deviation in pose pixels.
    pub pose_noise: f64,
    /// Probability that a frame's detections are dropped entirely.
    pub pose_dropout: f64,
    pub person_count: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Forearm angle offset (radians) separating the two near-duplicate
    /// motion classes.
    pub hand_detail: f64,
    /// Classes whose motion is nearly ambiguous, so context disambiguates.
    pub context_reliant_classes: Vec<usize>,
    /// Classes with the most distinctive motion.
    pub motion_defined_classes: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            frames_per_video: 48,
            appearance_size: (64, 64),
            pose_size: (16, 16),
            pose_noise: 0.5,
            pose_dropout: 0.1,
            person_count: 1,
            train_per_class: 40,
            val_per_class: 10,
            hand_detail: 0.04,
            context_reliant_classes: vec![6, 7],
            motion_defined_classes: vec![0, 3],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.frames_per_video == 0 || !(1..=3).contains(&self.person_count) {
            return Err(Error::Config("frames_per_video >= 1 and person_count in 1..=3 required".into()));
        }
        let (ha, wa) = self.appearance_size;
        let (hp, wp) = self.pose_size;
        if hp == 0 || wp == 0 || ha < hp || wa < wp {
            return Err(Error::Config("appearance frames must be at least as large as the pose canvas".into()));
        }
        if !(0.0..=1.0).contains(&self.pose_dropout) || self.pose_noise < 0.0 {
            return Err(Error::Config("pose_dropout must be a probability and pose_noise >= 0".into()));
        }
        Ok(())
    }

    /// Context class shown with `action` in out-of-context videos.
    pub fn deranged_context(&self, action: usize) -> usize {
        (action + self.num_classes / 2) % self.num_classes
    }

    fn pose_to_appearance(&self) -> (f64, f64) {
        (
            self.appearance_size.1 as f64 / self.pose_size.1 as f64,
            self.appearance_size.0 as f64 / self.pose_size.0 as f64,
        )
    }

    /// Maps a pose-canvas point to appearance pixels (pixel centers aligned).
    pub fn to_appearance(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.pose_to_appearance();
        ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValInContext,
    ValOutOfContext,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValInContext, Split::ValOutOfContext];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValInContext => "val_in_context",
            Split::ValOutOfContext => "val_out_of_context",
        }
    }

    /// How background context relates to the action in this split.
    pub fn context_mode(self) -> ContextMode {
        match self {
            Split::ValOutOfContext => ContextMode::Derangement,
            _ => ContextMode::Matched,
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::ValInContext => 1,
            Split::ValOutOfContext => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val_in_context" | "in" => Ok(Split::ValInContext),
            "val_out_of_context" | "out" => Ok(Split::ValOutOfContext),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDescriptor {
    pub video_id: String,
    pub action: usize,
    pub context: usize,
    pub seed: u64,
    pub split: Split,
}

/// Balanced, deterministic manifest for one split. Per-video seeds carry
/// the split in their high bits, so splits never share a seed.
pub fn make_dataset(split: Split, cfg: &SynthConfig, seed: u64) -> Result<Vec<VideoDescriptor>> {
    cfg.validate()?;
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        _ => cfg.val_per_class,
    };
    let mut out = Vec::with_capacity(per_class * cfg.num_classes);
    for i in 0..per_class {
        for action in 0..cfg.num_classes {
            let context = match split.context_mode() {
                ContextMode::Derangement => cfg.deranged_context(action),
                ContextMode::Matched => action,
            };
            let index = (i * cfg.num_classes + action) as u64;
            out.push(VideoDescriptor {
                video_id: format!("{}-{:05}", split.name(), index),
                action,
                context,
                seed: (seed << 26) ^ (split.id() << 24) ^ index,
                split,
            });
        }
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, videos: &[VideoDescriptor]) -> Result<()> {
    for v in videos {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<VideoDescriptor>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<VideoDescriptor>> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_manifest(path: &Path, videos: &[VideoDescriptor]) -> Result<()> {
    write_manifest(std::io::BufWriter::new(std::fs::File::create(path)?), videos)
}

/// Per-video constants drawn once from the video seed.
#[derive(Clone, Debug)]
struct VideoParams {
    center: (f64, f64),
    body_scale: f64,
    amplitude: f64,
    patch_origin: (usize, usize),
    brightness: f64,
}

fn video_params(seed: u64, cfg: &SynthConfig) -> VideoParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hp, wp) = cfg.pose_size;
    let (ha, wa) = cfg.appearance_size;
    let patch = patch_size(cfg);
    let jitter = wp as f64 / 32.0;
    let body_scale = rng.random_range(0.9..=1.1) * hp as f64 / 16.0;
    VideoParams {
        center: (
            (wp as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter),
            (hp as f64 - 1.0) / 2.0 + 0.3 * body_scale + rng.random_range(-jitter..=jitter),
        ),
        body_scale,
        amplitude: rng.random_range(0.85..=1.15),
        patch_origin: (rng.random_range(0..=ha - patch), rng.random_range(0..=wa - patch)),
        brightness: rng.random_range(0.9..=1.1),
    }
}

fn patch_size(cfg: &SynthConfig) -> usize {
    (cfg.appearance_size.0.min(cfg.appearance_size.1) * 5 / 16).max(1)
}

/// Joint angles of one arm: upper arm and forearm, measured from straight
/// down and opening outward (absolute, not relative to the upper arm).
#[derive(Clone, Copy, Debug)]
struct Arm {
    upper: f64,
    fore: f64,
}

impl Arm {
    const REST: Arm = Arm { upper: 0.3, fore: 0.3 };
}

#[derive(Clone, Copy, Debug)]
struct Posture {
    root: (f64, f64),
    right: Arm,
    left: Arm,
    /// Vertical drop of the pelvis with feet kept on the ground.
    crouch: f64,
    /// Knee bend while airborne.
    tuck: f64,
}

fn triangle(phase: f64) -> f64 {
    // period 2pi, range [-1, 1]
    let u = (phase / TAU).rem_euclid(1.0);
    if u < 0.5 {
        4.0 * u - 1.0
    } else {
        3.0 - 4.0 * u
    }
}

/// Pose of a motion class at frame `t` (pose-canvas units, before scaling
/// the body).
fn posture(action: usize, t: usize, cfg: &SynthConfig, p: &VideoParams) -> Posture {
    let f = cfg.frames_per_video as f64;
    let family = action % 8;
    let speed = 1.0 + (action / 8) as f64;
    let theta = TAU * t as f64 / f * speed;
    let a = p.amplitude;
    let (cx, cy) = p.center;
    let unit = p.body_scale;
    let mut pose = Posture {
        root: (cx, cy),
        right: Arm::REST,
        left: Arm::REST,
        crouch: 0.0,
        tuck: 0.0,
    };
    match family {
        0 => {
            let r = 1.8 * unit * a;
            pose.root = (cx + r * theta.cos(), cy + r * theta.sin());
        }
        1 => {
            pose.root = (cx + 2.5 * unit * a * triangle(theta), cy + 0.8 * unit * triangle(4.0 * theta));
            pose.right = Arm { upper: 0.7, fore: 0.7 };
            pose.left = pose.right;
        }
        2 => {
            let lift = 0.2 + 0.9 * PI * (0.5 - 0.5 * theta.cos()) * a.min(1.0);
            pose.right = Arm { upper: lift, fore: lift };
            pose.left = pose.right;
        }
        3 => {
            let air = theta.sin().abs();
            pose.root.1 = cy - 1.6 * unit * a * air;
            pose.tuck = air;
            let arms = 0.3 + 1.2 * air;
            pose.right = Arm { upper: arms, fore: arms };
            pose.left = pose.right;
        }
        4 => {
            pose.crouch = 1.5 * unit * a * (0.5 - 0.5 * theta.cos());
            pose.right = Arm { upper: PI / 2.0, fore: PI / 2.0 };
            pose.left = pose.right;
        }
        5 => {
            pose.right = Arm {
                upper: 2.2,
                fore: 2.6 + 0.6 * a * (3.0 * theta).sin(),
            };
        }
        _ => {
            let detail = if family == 7 { cfg.hand_detail } else { 0.0 };
            let punch = |e: f64| {
                let upper = PI / 2.0 * (0.3 + 0.7 * e);
                Arm { upper, fore: upper + 0.5 * (1.0 - e) + detail }
            };
            pose.right = punch(theta.sin().max(0.0));
            pose.left = punch((-theta.sin()).max(0.0));
        }
    }
    pose
}

/// Keypoint coordinates (pose canvas) for the 13-joint stick figure.
fn skeleton_points(pose: &Posture, unit: f64) -> Vec<(f64, f64)> {
    let (rx, ry) = pose.root;
    let ground = ry + pose.crouch + 3.6 * unit;
    let root = (rx, ry + pose.crouch);
    let neck = (root.0, root.1 - 3.0 * unit);
    let head = (neck.0, neck.1 - 1.2 * unit);
    let arm = |side: f64, arm: Arm| {
        let shoulder = (neck.0 + side * 1.2 * unit, neck.1 + 0.3 * unit);
        let elbow = (
            shoulder.0 + side * 1.5 * unit * arm.upper.sin(),
            shoulder.1 + 1.5 * unit * arm.upper.cos(),
        );
        let wrist = (
            elbow.0 + side * 1.5 * unit * arm.fore.sin(),
            elbow.1 + 1.5 * unit * arm.fore.cos(),
        );
        (shoulder, elbow, wrist)
    };
    let (rs, re, rw) = arm(-1.0, pose.right);
    let (ls, le, lw) = arm(1.0, pose.left);
    let leg = |side: f64| {
        let seg = 1.8 * unit;
        // feet stay on the ground for crouches; airborne legs tuck
        let drop = if pose.crouch > 0.0 { (ground - root.1).max(0.0) } else { 2.0 * seg * (1.0 - 0.3 * pose.tuck) };
        let half = (drop / 2.0).min(seg);
        let out = (seg * seg - half * half).max(0.0).sqrt();
        let knee = (root.0 + side * (0.6 * unit + out), root.1 + half);
        let ankle = (root.0 + side * 0.6 * unit, root.1 + drop);
        (knee, ankle)
    };
    let (rk, ra) = leg(-1.0);
    let (lk, la) = leg(1.0);
    vec![head, neck, rs, ls, re, le, rw, lw, root, rk, lk, ra, la]
}

fn person_offsets(count: usize, width: usize) -> Vec<(f64, f64, f64)> {
    let dx = width as f64 * 0.3;
    // (x offset, scale, detection score)
    [(0.0, 1.0, 0.95), (-dx, 0.7, 0.8), (dx, 0.7, 0.75)][..count].to_vec()
}

/// Noise-free joint positions of every rendered person at frame `t`.
fn clean_people(action: usize, t: usize, cfg: &SynthConfig, p: &VideoParams) -> Vec<(Vec<(f64, f64)>, f64)> {
    let base = posture(action, t, cfg, p);
    person_offsets(cfg.person_count, cfg.pose_size.1)
        .into_iter()
        .map(|(dx, scale, score)| {
            let mut pose = base;
            pose.root.0 += dx;
            let pts = skeleton_points(&pose, p.body_scale * scale);
            (pts, score)
        })
        .collect()
}

/// Root joint trajectory of a video, exposed for checking the motion
/// families against their closed forms.
pub fn root_position(action: usize, seed: u64, t: usize, cfg: &SynthConfig) -> (f64, f64) {
    let p = video_params(seed, cfg);
    skeleton_points(&posture(action, t, cfg, &p), p.body_scale)[8]
}

/// Video center and circle radius used by class 0 for a given seed.
pub fn circle_parameters(seed: u64, cfg: &SynthConfig) -> ((f64, f64), f64) {
    let p = video_params(seed, cfg);
    (p.center, 1.8 * p.body_scale * p.amplitude)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Background tint of a context class.
pub fn context_tint(context: usize, cfg: &SynthConfig) -> [f64; 3] {
    hsv(context as f64 / cfg.num_classes as f64, 0.65, 0.6)
}

fn draw_disc(img: &mut Array3<f64>, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let (_, h, w) = img.dim();
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as isize).min(h as isize - 1));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as isize).min(w as isize - 1));
    for y in y0..=y1.max(-1) as usize {
        for x in x0..=x1.max(-1) as usize {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
    }
}

fn draw_segment(img: &mut Array3<f64>, a: (f64, f64), b: (f64, f64), half_width: f64, color: [f64; 3]) {
    let (_, h, w) = img.dim();
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let lo_x = (a.0.min(b.0) - half_width).floor().max(0.0) as usize;
    let lo_y = (a.1.min(b.1) - half_width).floor().max(0.0) as usize;
    let hi_x = (a.0.max(b.0) + half_width).ceil().min(w as f64 - 1.0);
    let hi_y = (a.1.max(b.1) + half_width).ceil().min(h as f64 - 1.0);
    if hi_x < 0.0 || hi_y < 0.0 {
        return;
    }
    for y in lo_y..=hi_y as usize {
        for x in lo_x..=hi_x as usize {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let u = if len2 > 0.0 { ((px * vx + py * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (dx, dy) = (px - u * vx, py - u * vy);
            if dx * dx + dy * dy <= half_width * half_width {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
    }
}

/// Renders appearance frame `t` (RGB in `[0, 1]`, shape `3 x H_A x W_A`).
fn render_appearance(action: usize, context: usize, t: usize, cfg: &SynthConfig, p: &VideoParams, skeleton: &Skeleton) -> Array3<f64> {
    let (ha, wa) = cfg.appearance_size;
    let tint = context_tint(context, cfg);
    let mut img = Array3::zeros((3, ha, wa));
    for c in 0..3 {
        img.slice_mut(s![c, .., ..]).fill((tint[c] * p.brightness).min(1.0));
    }
    // striped texture patch keyed by the context class
    let n = cfg.num_classes as f64;
    let angle = PI * context as f64 / n;
    let freq = 0.12 + 0.1 * (context % 3) as f64;
    let stripe = hsv(context as f64 / n + 0.5, 0.8, 0.9);
    let size = patch_size(cfg);
    let (py, px) = p.patch_origin;
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * angle.cos() + y as f64 * angle.sin();
            let v = 0.5 + 0.5 * (TAU * freq * u).sin();
            for c in 0..3 {
                img[[c, py + y, px + x]] = v * stripe[c] + (1.0 - v) * 0.1;
            }
        }
    }
    let (sx, _) = cfg.pose_to_appearance();
    let white = [1.0; 3];
    for (pts, _) in clean_people(action, t, cfg, p) {
        let app: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| cfg.to_appearance(x, y)).collect();
        for &(a, b) in &skeleton.bones {
            draw_segment(&mut img, app[a], app[b], 0.25 * sx, white);
        }
        for &(x, y) in &app {
            draw_disc(&mut img, x, y, 0.375 * sx, white);
        }
    }
    img
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

/// Detected poses for frame `t`, with jitter and dropout applied.
fn render_pose(action: usize, seed: u64, t: usize, cfg: &SynthConfig, p: &VideoParams) -> PoseFrame {
    let mut rng = frame_rng(seed, t);
    if cfg.pose_dropout > 0.0 && rng.random_bool(cfg.pose_dropout) {
        return PoseFrame {
            persons: Vec::new(),
            frame_index: t,
        };
    }
    let noise = Normal::new(0.0, cfg.pose_noise.max(0.0)).expect("finite sigma");
    let persons = clean_people(action, t, cfg, p)
        .into_iter()
        .map(|(pts, score)| PersonPose {
            keypoints: pts
                .into_iter()
                .map(|(x, y)| {
                    let (nx, ny) = if cfg.pose_noise > 0.0 {
                        (noise.sample(&mut rng), noise.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    Keypoint::new(x + nx, y + ny, 1.0)
                })
                .collect(),
            person_score: score,
        })
        .collect();
    PoseFrame { persons, frame_index: t }
}

/// Random-access renderer for one video.
#[derive(Clone, Debug)]
pub struct VideoSource {
    pub action: usize,
    pub context: usize,
    pub seed: u64,
    cfg: SynthConfig,
    params: VideoParams,
    skeleton: Skeleton,
}

impl VideoSource {
    pub fn new(action: usize, context: usize, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        if action >= cfg.num_classes || context >= cfg.num_classes {
            return Err(shape_err("class index", format!("< {}", cfg.num_classes), action.max(context)));
        }
        Ok(Self {
            action,
            context,
            seed,
            params: video_params(seed, cfg),
            cfg: cfg.clone(),
            skeleton: Skeleton::stick_figure(),
        })
    }

    pub fn from_descriptor(d: &VideoDescriptor, cfg: &SynthConfig) -> Result<Self> {
        Self::new(d.action, d.context, d.seed, cfg)
    }

    pub fn len(&self) -> usize {
        self.cfg.frames_per_video
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.frames_per_video == 0
    }

    pub fn appearance_frame(&self, t: usize) -> Array3<f64> {
        render_appearance(self.action, self.context, t, &self.cfg, &self.params, &self.skeleton)
    }

    pub fn pose_frame(&self, t: usize) -> PoseFrame {
        render_pose(self.action, self.seed, t, &self.cfg, &self.params)
    }

    /// Joint positions without noise or dropout, for the primary person.
    pub fn clean_keypoints(&self, t: usize) -> Vec<(f64, f64)> {
        clean_people(self.action, t, &self.cfg, &self.params).remove(0).0
    }
}

/// A fully rendered video.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    /// `F x 3 x H_A x W_A`, RGB in `[0, 1]`.
    pub appearance_frames: Array4<f64>,
    pub pose_frames: Vec<PoseFrame>,
    pub action_label: usize,
    pub context_label: usize,
}

pub fn generate_video(action: usize, context: usize, seed: u64, cfg: &SynthConfig) -> Result<SyntheticVideo> {
    let src = VideoSource::new(action, context, seed, cfg)?;
    let (ha, wa) = cfg.appearance_size;
    let mut frames = Array4::zeros((src.len(), 3, ha, wa));
    let mut poses = Vec::with_capacity(src.len());
    for t in 0..src.len() {
        frames.slice_mut(s![t, .., .., ..]).assign(&src.appearance_frame(t));
        poses.push(src.pose_frame(t));
    }
    Ok(SyntheticVideo {
        appearance_frames: frames,
        pose_frames: poses,
        action_label: action,
        context_label: context,
    })
}

/// Writes `T x C x H x W` frames as `AVC1` + four LE u32 dims + LE f32 data.
pub fn write_video_container<W: Write>(mut w: W, frames: &Array4<f64>) -> Result<()> {
    w.write_all(VIDEO_MAGIC)?;
    let (t, c, h, wd) = frames.dim();
    for d in [t, c, h, wd] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in frames.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_video_container<R: Read>(mut r: R) -> Result<Array4<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VIDEO_MAGIC {
        return Err(Error::Format(format!("bad video container magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let n = dims.iter().product::<usize>();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            frames_per_video: 12,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_video(3, 5, 42, &cfg()).unwrap();
        let b = generate_video(3, 5, 42, &cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_video(3, 5, 43, &cfg()).unwrap();
        assert_ne!(a.pose_frames, c.pose_frames);
    }

    #[test]
    fn circle_root_follows_closed_form() {
        let cfg = SynthConfig::default();
        for seed in [1u64, 99, 12345] {
            let ((cx, cy), r) = circle_parameters(seed, &cfg);
            for t in 0..cfg.frames_per_video {
                let th = TAU * t as f64 / cfg.frames_per_video as f64;
                let (x, y) = root_position(0, seed, t, &cfg);
                assert!((x - (cx + r * th.cos())).abs() < 1e-12);
                assert!((y - (cy + r * th.sin())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_dropout_removes_everyone() {
        let c = SynthConfig {
            pose_dropout: 1.0,
            ..cfg()
        };
        let v = generate_video(1, 1, 7, &c).unwrap();
        assert!(v.pose_frames.iter().all(|f| f.persons.is_empty()));
    }

    #[test]
    fn manifests_are_balanced_and_deranged() {
        let c = SynthConfig::default();
        let mut seeds = std::collections::HashSet::new();
        for split in Split::ALL {
            let m = make_dataset(split, &c, 3).unwrap();
            let mut hist = vec![0; c.num_classes];
            for d in &m {
                hist[d.action] += 1;
                assert!(seeds.insert(d.seed), "seed reused across splits");
                match split {
                    Split::ValOutOfContext => assert_ne!(d.action, d.context),
                    _ => assert_eq!(d.action, d.context),
                }
            }
            assert!(hist.iter().all(|&h| h == hist[0]));
            assert_eq!(m, make_dataset(split, &c, 3).unwrap());
        }
        for n in 2..12 {
            let c = SynthConfig {
                num_classes: n,
                ..Default::default()
            };
            assert!((0..n).all(|a| c.deranged_context(a) != a));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = make_dataset(Split::ValInContext, &cfg(), 1).unwrap();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &m).unwrap();
        let line = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["video_id", "action", "context", "seed", "split"] {
            assert!(v.get(key).is_some());
        }
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn joints_are_drawn_where_the_pose_says() {
        let c = SynthConfig {
            pose_noise: 0.0,
            pose_dropout: 0.0,
            ..cfg()
        };
        for action in 0..c.num_classes {
            let src = VideoSource::new(action, action, 11, &c).unwrap();
            for t in [0, 5] {
                let img = src.appearance_frame(t);
                let pose = src.pose_frame(t);
                for kp in &pose.persons[0].keypoints {
                    assert!(kp.x >= 0.0 && kp.x <= 15.0 && kp.y >= 0.0 && kp.y <= 15.0);
                    let (ax, ay) = c.to_appearance(kp.x, kp.y);
                    let (x, y) = (ax.round() as usize, ay.round() as usize);
                    assert!((0..3).all(|ch| img[[ch, y, x]] == 1.0));
                }
            }
        }
    }

    #[test]
    fn near_duplicate_classes_differ_only_slightly() {
        let c = SynthConfig {
            pose_noise: 0.0,
            pose_dropout: 0.0,
            ..cfg()
        };
        let a = VideoSource::new(6, 6, 5, &c).unwrap();
        let b = VideoSource::new(7, 7, 5, &c).unwrap();
        for t in 0..c.frames_per_video {
            let (pa, pb) = (a.clean_keypoints(t), b.clean_keypoints(t));
            let max = pa.iter().zip(&pb).map(|(p, q)| (p.0 - q.0).hypot(p.1 - q.1)).fold(0.0, f64::max);
            assert!(max > 0.0 && max < 0.3, "max wrist gap {max}");
        }
    }

    #[test]
    fn video_container_round_trip() {
        let v = generate_video(2, 2, 1, &SynthConfig {
            frames_per_video: 2,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_video_container(&mut buf, &v.appearance_frames).unwrap();
        assert_eq!(&buf[..4], b"AVC1");
        let back = read_video_container(buf.as_slice()).unwrap();
        assert_eq!(back.dim(), v.appearance_frames.dim());
        assert!(back.iter().zip(v.appearance_frames.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
