//! Pose-sequence encoding.
//!
//! Turns per-frame multi-person keypoint detections into the dense tensor the
//! pose stream consumes: `K` Gaussian keypoint heatmaps followed by `B`
//! part-affinity fields, each stored as an (x, y) channel pair. The layout of
//! one encoded frame is therefore `K + 2B` channels of `H_P x W_P` pixels.
//!
//! Pixel `(x, y)` is sampled at its integer center. Keypoint coordinates stay
//! continuous, so sub-pixel keypoints peak below 1.0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayViewMut3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Magic bytes of the encoded-clip container.
pub const CLIP_MAGIC: &[u8; 4] = b"PTC1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// `false` when the detector produced nothing for this joint; `x`/`y`
    /// are then ignored.
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self {
            x,
            y,
            score: score.clamp(0.0, 1.0),
            visible: true,
        }
    }

    pub fn missing() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            score: 0.0,
            visible: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonPose {
    pub keypoints: Vec<Keypoint>,
    pub person_score: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PoseFrame {
    pub persons: Vec<PersonPose>,
    pub frame_index: usize,
}

/// Joint count, bone list and left/right pairs of a skeleton graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub num_keypoints: usize,
    /// `(parent, child)` keypoint indices.
    pub bones: Vec<(usize, usize)>,
    /// `(left, right)` keypoint indices swapped by a horizontal flip.
    pub flip_pairs: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn new(
        num_keypoints: usize,
        bones: Vec<(usize, usize)>,
        flip_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let sk = Self {
            num_keypoints,
            bones,
            flip_pairs,
        };
        sk.validate()?;
        Ok(sk)
    }

    /// 13-joint stick figure with 12 bones.
    ///
    /// Joints: 0 head, 1 neck, 2/3 shoulders, 4/5 elbows, 6/7 wrists,
    /// 8 pelvis (root), 9/10 knees, 11/12 ankles. Even/odd pairs are
    /// left/right.
    pub fn stick_figure() -> Self {
        Self {
            num_keypoints: 13,
            bones: vec![
                (1, 0),
                (1, 2),
                (1, 3),
                (2, 4),
                (3, 5),
                (4, 6),
                (5, 7),
                (1, 8),
                (8, 9),
                (8, 10),
                (9, 11),
                (10, 12),
            ],
            flip_pairs: vec![(2, 3), (4, 5), (6, 7), (9, 10), (11, 12)],
        }
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    /// Total encoded channel count, `K + 2B`.
    pub fn num_channels(&self) -> usize {
        self.num_keypoints + 2 * self.bones.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_keypoints;
        if k == 0 {
            return Err(Error::Config("skeleton needs at least one keypoint".into()));
        }
        for &(p, c) in &self.bones {
            if p >= k || c >= k {
                return Err(Error::Config(format!("bone ({p}, {c}) out of range for K={k}")));
            }
            if p == c {
                return Err(Error::Config(format!("bone ({p}, {c}) connects a joint to itself")));
            }
        }
        let mut seen = vec![false; k];
        for &(l, r) in &self.flip_pairs {
            for i in [l, r] {
                if i >= k {
                    return Err(Error::Config(format!("flip pair index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("flip pair index {i} used twice")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let sk: Skeleton = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        sk.validate()?;
        Ok(sk)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sigma: f64,
    pub max_persons: usize,
    pub min_person_score: f64,
    pub paf_line_width: f64,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            max_persons: 5,
            min_person_score: 0.1,
            paf_line_width: 1.0,
            heatmap_height: 16,
            heatmap_width: 16,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("codec.sigma must be positive".into()));
        }
        if self.max_persons == 0 {
            return Err(Error::Config("codec.max_persons must be at least 1".into()));
        }
        if !(self.paf_line_width >= 1.0) {
            return Err(Error::Config("codec.paf_line_width must be >= 1".into()));
        }
        if self.heatmap_height == 0 || self.heatmap_width == 0 {
            return Err(Error::Config("codec heatmap size must be non-zero".into()));
        }
        Ok(())
    }
}

/// Encoded pose sequence, shape `T x (K + 2B) x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTensorClip {
    pub data: Array4<f64>,
    pub num_keypoints: usize,
    pub num_bones: usize,
}

impl PoseTensorClip {
    pub fn num_frames(&self) -> usize {
        self.data.dim().0
    }

    /// Writes the `PTC1` container: magic, then `T, K, B, H, W` as
    /// little-endian u32, then row-major little-endian f32 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (t, _, h, wd) = self.data.dim();
        w.write_all(CLIP_MAGIC)?;
        for v in [t, self.num_keypoints, self.num_bones, h, wd] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &v in self.data.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CLIP_MAGIC {
            return Err(Error::Format(format!("bad clip magic {magic:?}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let [t, k, b, h, w] = dims;
        let len = t * (k + 2 * b) * h * w;
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let data = Array4::from_shape_vec((t, k + 2 * b, h, w), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            data,
            num_keypoints: k,
            num_bones: b,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Persons scoring at least `min_person_score`, best first, at most
/// `max_persons`. Ties keep their input order.
pub fn select_persons(frame: &PoseFrame, cfg: &CodecConfig) -> Vec<PersonPose> {
    let mut kept: Vec<&PersonPose> = frame
        .persons
        .iter()
        .filter(|p| p.person_score >= cfg.min_person_score)
        .collect();
    // sort_by is stable
    kept.sort_by(|a, b| b.person_score.total_cmp(&a.person_score));
    kept.into_iter().take(cfg.max_persons).cloned().collect()
}

/// Sum of per-person Gaussian blobs for each keypoint, clamped to 1.0.
pub fn render_keypoint_heatmaps(
    persons: &[PersonPose],
    num_keypoints: usize,
    cfg: &CodecConfig,
) -> Array3<f64> {
    let mut out = Array3::zeros((num_keypoints, cfg.heatmap_height, cfg.heatmap_width));
    render_heatmaps_into(persons, cfg, out.view_mut());
    out
}

fn render_heatmaps_into(persons: &[PersonPose], cfg: &CodecConfig, mut out: ArrayViewMut3<f64>) {
    let (k_total, h, w) = out.dim();
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    for k in 0..k_total {
        let mut plane = out.slice_mut(s![k, .., ..]);
        for person in persons {
            let Some(kp) = person.keypoints.get(k) else {
                continue;
            };
            if !kp.visible {
                continue;
            }
            for y in 0..h {
                let dy = y as f64 - kp.y;
                for x in 0..w {
                    let dx = x as f64 - kp.x;
                    plane[[y, x]] += (-(dx * dx + dy * dy) / denom).exp();
                }
            }
        }
        plane.mapv_inplace(|v| v.min(1.0));
    }
}

/// Part-affinity fields: each bone's unit direction painted along its
/// segment, averaged where several persons cover the same pixel.
pub fn render_pafs(persons: &[PersonPose], skeleton: &Skeleton, cfg: &CodecConfig) -> Array3<f64> {
    let mut out = Array3::zeros((2 * skeleton.num_bones(), cfg.heatmap_height, cfg.heatmap_width));
    render_pafs_into(persons, skeleton, cfg, out.view_mut());
    out
}

fn render_pafs_into(
    persons: &[PersonPose],
    skeleton: &Skeleton,
    cfg: &CodecConfig,
    mut out: ArrayViewMut3<f64>,
) {
    let (_, h, w) = out.dim();
    let radius = cfg.paf_line_width / 2.0;
    let mut count = vec![0u32; h * w];
    for (b, &(parent, child)) in skeleton.bones.iter().enumerate() {
        count.iter_mut().for_each(|c| *c = 0);
        for person in persons {
            let (Some(p), Some(c)) = (person.keypoints.get(parent), person.keypoints.get(child))
            else {
                continue;
            };
            if !p.visible || !c.visible {
                continue;
            }
            let (dx, dy) = (c.x - p.x, c.y - p.y);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let len = len2.sqrt();
            let (vx, vy) = (dx / len, dy / len);
            for y in 0..h {
                for x in 0..w {
                    if point_segment_distance(x as f64, y as f64, p.x, p.y, dx, dy, len2) <= radius {
                        out[[2 * b, y, x]] += vx;
                        out[[2 * b + 1, y, x]] += vy;
                        count[y * w + x] += 1;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let n = count[y * w + x];
                if n > 1 {
                    out[[2 * b, y, x]] /= n as f64;
                    out[[2 * b + 1, y, x]] /= n as f64;
                }
            }
        }
    }
}

fn point_segment_distance(px: f64, py: f64, ax: f64, ay: f64, dx: f64, dy: f64, len2: f64) -> f64 {
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Encodes one frame into `out`, shape `(K + 2B) x H x W`.
pub(crate) fn encode_frame_into(
    frame: &PoseFrame,
    skeleton: &Skeleton,
    cfg: &CodecConfig,
    mut out: ArrayViewMut3<f64>,
) {
    let persons = select_persons(frame, cfg);
    let k = skeleton.num_keypoints;
    render_heatmaps_into(&persons, cfg, out.slice_mut(s![..k, .., ..]));
    render_pafs_into(&persons, skeleton, cfg, out.slice_mut(s![k.., .., ..]));
}

/// Selects, renders and stacks every frame into a `PoseTensorClip`.
pub fn encode_pose_clip(
    frames: &[PoseFrame],
    skeleton: &Skeleton,
    cfg: &CodecConfig,
) -> Result<PoseTensorClip> {
    if frames.is_empty() {
        return Err(Error::Empty("pose clip has no frames"));
    }
    for frame in frames {
        for person in &frame.persons {
            if person.keypoints.len() != skeleton.num_keypoints {
                return Err(shape_err(
                    "encode_pose_clip keypoints",
                    skeleton.num_keypoints,
                    person.keypoints.len(),
                ));
            }
        }
    }
    let mut data = Array4::zeros((
        frames.len(),
        skeleton.num_channels(),
        cfg.heatmap_height,
        cfg.heatmap_width,
    ));
    for (t, frame) in frames.iter().enumerate() {
        encode_frame_into(frame, skeleton, cfg, data.slice_mut(s![t, .., .., ..]));
    }
    Ok(PoseTensorClip {
        data,
        num_keypoints: skeleton.num_keypoints,
        num_bones: skeleton.num_bones(),
    })
}

/// Mirrors a frame horizontally about a canvas `width` pixels wide and swaps
/// left/right joints.
pub fn flip_pose_frame(frame: &PoseFrame, skeleton: &Skeleton, width: usize) -> PoseFrame {
    let w = width as f64;
    let persons = frame
        .persons
        .iter()
        .map(|p| {
            let mut kps: Vec<Keypoint> = p
                .keypoints
                .iter()
                .map(|kp| Keypoint {
                    x: (w - 1.0) - kp.x,
                    ..*kp
                })
                .collect();
            for &(l, r) in &skeleton.flip_pairs {
                if l < kps.len() && r < kps.len() {
                    kps.swap(l, r);
                }
            }
            PersonPose {
                keypoints: kps,
                person_score: p.person_score,
            }
        })
        .collect();
    PoseFrame {
        persons,
        frame_index: frame.frame_index,
    }
}

#[derive(Serialize, Deserialize)]
struct RawPerson {
    score: f64,
    keypoints: Vec<Option<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    frame: usize,
    persons: Vec<RawPerson>,
}

/// Reads newline-delimited JSON pose detections, one frame per line.
/// A `null` keypoint entry marks a joint the detector did not find.
pub fn read_pose_ndjson(reader: impl BufRead) -> Result<Vec<PoseFrame>> {
    let mut frames = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawFrame = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("pose line {}: {e}", lineno + 1)))?;
        let persons = raw
            .persons
            .into_iter()
            .map(|p| PersonPose {
                person_score: p.score,
                keypoints: p
                    .keypoints
                    .into_iter()
                    .map(|kp| match kp {
                        Some([x, y, s]) => Keypoint::new(x, y, s),
                        None => Keypoint::missing(),
                    })
                    .collect(),
            })
            .collect();
        frames.push(PoseFrame {
            persons,
            frame_index: raw.frame,
        });
    }
    Ok(frames)
}

pub fn write_pose_ndjson(frames: &[PoseFrame], mut w: impl Write) -> Result<()> {
    for f in frames {
        let raw = RawFrame {
            frame: f.frame_index,
            persons: f
                .persons
                .iter()
                .map(|p| RawPerson {
                    score: p.person_score,
                    keypoints: p
                        .keypoints
                        .iter()
                        .map(|kp| kp.visible.then_some([kp.x, kp.y, kp.score]))
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
