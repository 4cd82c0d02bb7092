//! Shared helpers for the integration tests: a per-pixel codec oracle,
//! random pose frames, a finite-difference checker and small configs.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use posegate::backbone::{StreamConfig, StreamKind};
use posegate::config::Config;
use posegate::integrator::{GateSource, IntegratorConfig};
use posegate::model::{Model, ModelConfig, Variant};
use posegate::nn::Module;
use posegate::pose_codec::{CodecConfig, Keypoint, PersonPose, PoseFrame, Skeleton};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A frame with up to `max_persons` people, random visibility and scores,
/// keypoints anywhere on (and slightly beyond) a `w x h` canvas.
pub fn random_frame(r: &mut ChaCha8Rng, k: usize, w: usize, h: usize, max_persons: usize) -> PoseFrame {
    let n = r.random_range(0..=max_persons);
    let persons = (0..n)
        .map(|_| PersonPose {
            person_score: r.random_range(0.0..1.0),
            keypoints: (0..k)
                .map(|_| {
                    if r.random_bool(0.15) {
                        Keypoint::missing()
                    } else {
                        let x = r.random_range(-1.0..w as f64);
                        let y = r.random_range(-1.0..h as f64);
                        // a share of integer coordinates exercises exact peaks and shared pixels
                        if r.random_bool(0.3) {
                            Keypoint::new(x.round(), y.round(), 1.0)
                        } else {
                            Keypoint::new(x, y, r.random_range(0.0..1.0))
                        }
                    }
                })
                .collect(),
        })
        .collect();
    PoseFrame { persons, frame_index: 0 }
}

/// Naive encoder: every output value computed independently from the
/// definitions, pixel by pixel. Returns `(K + 2B) x H x W` in row-major order.
pub fn naive_encode_frame(frame: &PoseFrame, sk: &Skeleton, cfg: &CodecConfig) -> Vec<f64> {
    // selection: score threshold, stable descending sort, top-N
    let mut idx: Vec<usize> = (0..frame.persons.len())
        .filter(|&i| frame.persons[i].person_score >= cfg.min_person_score)
        .collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && frame.persons[idx[j - 1]].person_score < frame.persons[idx[j]].person_score {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx.truncate(cfg.max_persons);
    let people: Vec<&PersonPose> = idx.iter().map(|&i| &frame.persons[i]).collect();

    let (h, w) = (cfg.heatmap_height, cfg.heatmap_width);
    let k = sk.num_keypoints;
    let mut out = vec![0.0; (k + 2 * sk.bones.len()) * h * w];
    for c in 0..k {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for p in &people {
                    let kp = p.keypoints[c];
                    if kp.visible {
                        let d2 = (x as f64 - kp.x).powi(2) + (y as f64 - kp.y).powi(2);
                        v += (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp();
                    }
                }
                out[(c * h + y) * w + x] = if v > 1.0 { 1.0 } else { v };
            }
        }
    }
    for (b, &(pa, ch)) in sk.bones.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut hits: Vec<(f64, f64)> = Vec::new();
                for p in &people {
                    let (a, e) = (p.keypoints[pa], p.keypoints[ch]);
                    if !a.visible || !e.visible || (a.x == e.x && a.y == e.y) {
                        continue;
                    }
                    let (sx, sy) = (e.x - a.x, e.y - a.y);
                    let len = (sx * sx + sy * sy).sqrt();
                    // closest point on the segment
                    let t = (((x as f64 - a.x) * sx + (y as f64 - a.y) * sy) / (len * len)).clamp(0.0, 1.0);
                    let dist = ((x as f64 - (a.x + t * sx)).powi(2) + (y as f64 - (a.y + t * sy)).powi(2)).sqrt();
                    if dist <= cfg.paf_line_width / 2.0 {
                        hits.push((sx / len, sy / len));
                    }
                }
                if !hits.is_empty() {
                    let n = hits.len() as f64;
                    out[((k + 2 * b) * h + y) * w + x] = hits.iter().map(|v| v.0).sum::<f64>() / n;
                    out[((k + 2 * b + 1) * h + y) * w + x] = hits.iter().map(|v| v.1).sum::<f64>() / n;
                }
            }
        }
    }
    out
}

/// Central-difference check of every `stride`-th entry of every trainable
/// parameter accepted by `filter`. Analytic gradients must already be in
/// the parameters. Returns the worst relative error and its location.
pub fn finite_difference<M: Module>(
    m: &mut M,
    filter: impl Fn(&str) -> bool,
    stride: usize,
    step: f64,
    mut loss: impl FnMut(&mut M) -> f64,
) -> (f64, String, usize) {
    let mut targets = Vec::new();
    m.visit("", &mut |name, p| {
        if p.trainable && filter(name) {
            for (i, g) in p.grad.iter().enumerate() {
                if i % stride == 0 {
                    targets.push((name.to_string(), i, *g));
                }
            }
        }
    });
    assert!(!targets.is_empty(), "no parameters selected");
    let mut worst = (0.0, String::new(), 0);
    for (name, i, analytic) in targets {
        let nudge = |m: &mut M, delta: f64| {
            m.visit_mut("", &mut |n, p| {
                if n == name {
                    let v = p.value.as_slice_mut().expect("contiguous");
                    v[i] += delta;
                }
            })
        };
        nudge(m, step);
        let up = loss(m);
        nudge(m, -2.0 * step);
        let down = loss(m);
        nudge(m, step);
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, name.clone(), i);
        }
    }
    worst
}

pub fn random_array4(r: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || r.random_range(-scale..scale))
}

/// Tiny configuration for fast training-contract tests.
pub fn tiny_config() -> Config {
    let mut cfg = Config::toy();
    cfg.synth.num_classes = 4;
    cfg.model.num_classes = 4;
    cfg.synth.train_per_class = 2;
    cfg.synth.val_per_class = 1;
    cfg.synth.frames_per_video = 16;
    cfg.synth.appearance_size = (32, 32);
    cfg.synth.pose_size = (8, 8);
    cfg.codec.heatmap_height = 8;
    cfg.codec.heatmap_width = 8;
    cfg.synth.context_reliant_classes = vec![2, 3];
    cfg.synth.motion_defined_classes = vec![0, 1];
    cfg.sampling.frames = 4;
    cfg.sampling.interval = 4;
    cfg.sampling.eval_clips = 2;
    cfg.streams.base_widths = vec![64, 128];
    cfg.streams.blocks_per_stage = vec![1, 1];
    cfg.integrator.common_width = 16;
    cfg.train.batch_size = 4;
    cfg.train.stream_epochs = 1;
    cfg.train.stream_decay_epochs = vec![];
    cfg.train.integrator_epochs = 2;
    cfg.train.integrator_decay_epochs = vec![1];
    cfg.train.cache_clips = 1;
    cfg
}

/// Stream config small enough for finite differences: two stages of one
/// block, 8 and 16 channels, so each block shifts exactly one (resp. two)
/// channels each way.
pub fn fd_stream_config(kind: StreamKind, frames: usize) -> StreamConfig {
    let (input_channels, spatial_in) = match kind {
        StreamKind::Appearance => (3, (16, 16)),
        StreamKind::Pose => (5, (6, 6)),
    };
    StreamConfig {
        kind,
        stage_widths: vec![8, 16],
        blocks_per_stage: vec![1, 1],
        shift_fraction: 0.125,
        input_channels,
        spatial_in,
        frames,
        stem_kernel: 7,
        init_std: 0.3,
    }
}

/// A model over the finite-difference streams with heads and integrator
/// initialized wide enough that every gradient is well above rounding noise.
pub fn fd_model(variant: Variant, gate_source: GateSource, frames: usize, seed: u64) -> Model {
    let mc = ModelConfig {
        variant,
        num_classes: 5,
        head_init_std: 0.3,
        ..ModelConfig::default()
    };
    let ic = IntegratorConfig {
        common_width: 12,
        gate_source,
        init_std: 0.3,
    };
    let mut r = rng(seed);
    Model::new(
        mc,
        &fd_stream_config(StreamKind::Appearance, frames),
        &fd_stream_config(StreamKind::Pose, frames),
        &ic,
        &mut r,
    )
    .expect("model")
}

/// Random stacked inputs `(C, N*T, H, W)` for both streams.
pub fn fd_inputs(clips: usize, frames: usize, seed: u64) -> (Array4<f64>, Array4<f64>) {
    let mut r = rng(seed);
    let a = random_array4(&mut r, (3, clips * frames, 16, 16), 1.0);
    let p = random_array4(&mut r, (5, clips * frames, 6, 6), 1.0);
    (a, p)
}

/// Composite loss from its definition: per clip, cross entropy of the
/// frame-averaged softmax plus `lambda` times the mean of `-ln(1 - G)`, then
/// averaged over clips.
pub fn oracle_loss(probs: &Array2<f64>, gate: Option<&Array2<f64>>, labels: &[usize], frames: usize, lambda: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let rows = i * frames..(i + 1) * frames;
        let pbar: f64 = rows.clone().map(|t| probs[[t, y]]).sum::<f64>() / frames as f64;
        total -= pbar.ln();
        if let Some(g) = gate {
            let c = g.ncols();
            let pen: f64 = rows.flat_map(|t| (0..c).map(move |j| (t, j))).map(|(t, j)| -(1.0 - g[[t, j]]).ln()).sum();
            total += lambda * pen / (frames * c) as f64;
        }
    }
    total / labels.len() as f64
}
