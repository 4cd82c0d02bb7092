//! Appearance and pose feature streams.
//!
//! Both streams are residual stacks of 2D convolutions with a temporal shift
//! on the input of every residual branch. The appearance stream starts with
//! a strided stem and a max pool; the pose stream replaces them with a
//! stride-1 front-end block, so a pose canvas a quarter the size of the RGB
//! frame reaches the same final grid.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu, relu_backward, BatchNorm, Conv2d, Ctx,
    MaxPool, Module, Param,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Appearance,
    Pose,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Appearance => "appearance",
            StreamKind::Pose => "pose",
        }
    }
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(StreamKind::Appearance),
            "pose" => Ok(StreamKind::Pose),
            other => Err(Error::Config(format!("unknown stream kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub shift_fraction: f64,
    pub input_channels: usize,
    /// Input `(height, width)`.
    pub spatial_in: (usize, usize),
    /// Frames per clip.
    pub frames: usize,
    /// Appearance stem kernel (7 as in ResNet; 3 for a lighter stem).
    pub stem_kernel: usize,
    pub init_std: f64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.shift_fraction) {
            return Err(Error::Config("shift_fraction must lie in [0, 1/2]".into()));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config("stage_widths and blocks_per_stage must have equal, non-zero length".into()));
        }
        if self.frames == 0 || self.input_channels == 0 {
            return Err(Error::Config("stream frames and input channels must be >= 1".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("stem kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    /// Spatial grid entering the first residual stage.
    pub fn stage_input_size(&self) -> (usize, usize) {
        let (h, w) = self.spatial_in;
        match self.kind {
            StreamKind::Pose => (h, w),
            StreamKind::Appearance => {
                let p = self.stem_kernel / 2;
                let conv = |v: usize| (v + 2 * p - self.stem_kernel) / 2 + 1;
                MaxPool::out_size(conv(h), conv(w))
            }
        }
    }

    /// Spatial grid right before global pooling.
    pub fn final_grid(&self) -> (usize, usize) {
        let (mut h, mut w) = self.stage_input_size();
        for _ in 1..self.stage_widths.len() {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }
}

/// One clip's frame-level features, shape `T x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    pub data: Array2<f64>,
}

impl FeatureSeq {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Temporal shift of a single clip laid out `T x C x H x W`.
///
/// With `n = floor(fraction * C)`, channels `[0, n)` take the previous
/// frame, channels `[n, 2n)` take the next frame, and boundary frames are
/// zero-filled. All other channels pass through untouched.
pub fn temporal_shift(x: &Array4<f64>, fraction: f64) -> Array4<f64> {
    let (t, c, _, _) = x.dim();
    let n = shift_count(c, fraction);
    let mut out = x.clone();
    for ch in 0..n.min(c) {
        out.slice_mut(s![0, ch, .., ..]).fill(0.0);
        for f in 1..t {
            let prev = x.slice(s![f - 1, ch, .., ..]);
            out.slice_mut(s![f, ch, .., ..]).assign(&prev);
        }
    }
    for ch in n..(2 * n).min(c) {
        out.slice_mut(s![t - 1, ch, .., ..]).fill(0.0);
        for f in 0..t.saturating_sub(1) {
            let next = x.slice(s![f + 1, ch, .., ..]);
            out.slice_mut(s![f, ch, .., ..]).assign(&next);
        }
    }
    out
}

fn shift_count(channels: usize, fraction: f64) -> usize {
    (fraction * channels as f64).floor() as usize
}

/// Temporal shift on the channel-major batch layout `(C, N*T, H, W)`.
/// `adjoint` applies the transpose (used by the backward pass).
pub(crate) fn shift_batch(x: &Array4<f64>, frames: usize, fraction: f64, adjoint: bool) -> Array4<f64> {
    let (c, b, _, _) = x.dim();
    let n = shift_count(c, fraction);
    if n == 0 {
        return x.clone();
    }
    let clips = b / frames;
    let mut out = x.clone();
    for ch in 0..(2 * n).min(c) {
        // forward group reads t-1; its adjoint reads t+1
        let from_prev = (ch < n) != adjoint;
        for clip in 0..clips {
            let base = clip * frames;
            for t in 0..frames {
                let src = if from_prev { t.checked_sub(1) } else { Some(t + 1).filter(|&s| s < frames) };
                let mut dst = out.slice_mut(s![ch, base + t, .., ..]);
                match src {
                    Some(s) => dst.assign(&x.slice(s![ch, base + s, .., ..])),
                    None => dst.fill(0.0),
                }
            }
        }
    }
    out
}

/// `[TSM -> conv3x3 -> BN -> ReLU -> conv3x3 -> BN] + skip -> ReLU`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub proj: Option<(Conv2d, BatchNorm)>,
    pub shift_fraction: f64,
    pub frames: usize,
    cache: Option<(Array4<f64>, Array4<f64>)>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        shift_fraction: f64,
        frames: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let proj = (in_ch != out_ch || stride != 1).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, false, init_std, rng),
                BatchNorm::new(out_ch),
            )
        });
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, init_std, rng),
            bn1: BatchNorm::new(out_ch),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, init_std, rng),
            bn2: BatchNorm::new(out_ch),
            proj,
            shift_fraction,
            frames,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, ctx: Ctx) -> Result<Array4<f64>> {
        let b = x.dim().1;
        if b % self.frames != 0 {
            return Err(shape_err("residual block frame count", format!("multiple of {}", self.frames), b));
        }
        let shifted = shift_batch(x, self.frames, self.shift_fraction, false);
        let a1 = self.conv1.forward(&shifted, ctx)?;
        let r1 = relu(&self.bn1.forward4(&a1, ctx)?);
        let a2 = self.conv2.forward(&r1, ctx)?;
        let mut out = self.bn2.forward4(&a2, ctx)?;
        match &mut self.proj {
            Some((conv, bn)) => out += &bn.forward4(&conv.forward(x, ctx)?, ctx)?,
            None => {
                if x.dim() != out.dim() {
                    return Err(shape_err("residual skip", out.dim(), x.dim()));
                }
                out += x
            }
        }
        let out = relu(&out);
        if ctx.record {
            self.cache = Some((r1, out.clone()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, dout: &Array4<f64>) -> Array4<f64> {
        let (r1, out) = self.cache.take().expect("residual backward without recorded forward");
        let d = relu_backward(&out, dout);
        let da2 = self.bn2.backward4(&d);
        let dr1 = self.conv2.backward(&da2, true).expect("input grad");
        let da1 = self.bn1.backward4(&relu_backward(&r1, &dr1));
        let ds = self.conv1.backward(&da1, true).expect("input grad");
        let mut dx = shift_batch(&ds, self.frames, self.shift_fraction, true);
        match &mut self.proj {
            Some((conv, bn)) => {
                let dp = bn.backward4(&d);
                dx += &conv.backward(&dp, true).expect("input grad");
            }
            None => dx += &d,
        }
        dx
    }
}

impl Module for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &self.proj {
            c.visit(&join(prefix, "proj.conv"), f);
            b.visit(&join(prefix, "proj.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.proj {
            c.visit_mut(&join(prefix, "proj.conv"), f);
            b.visit_mut(&join(prefix, "proj.bn"), f);
        }
    }
}

/// A full feature stream: stem (or pose front-end), residual stages and a
/// per-frame global average pool.
#[derive(Clone, Debug)]
pub struct Stream {
    pub cfg: StreamConfig,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pool: Option<MaxPool>,
    pub blocks: Vec<ResidualBlock>,
    cache: Option<StreamCache>,
}

#[derive(Clone, Debug)]
struct StreamCache {
    stem_out: Array4<f64>,
    grid: (usize, usize),
}

impl Stream {
    pub fn new<R: Rng + ?Sized>(cfg: StreamConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let first = cfg.stage_widths[0];
        let (stem, pool) = match cfg.kind {
            StreamKind::Appearance => (
                Conv2d::new(
                    cfg.input_channels,
                    first,
                    cfg.stem_kernel,
                    2,
                    cfg.stem_kernel / 2,
                    false,
                    cfg.init_std,
                    rng,
                ),
                Some(MaxPool::default()),
            ),
            StreamKind::Pose => (
                Conv2d::new(cfg.input_channels, first, 3, 1, 1, false, cfg.init_std, rng),
                None,
            ),
        };
        let mut blocks = Vec::new();
        let mut in_ch = first;
        for (stage, (&width, &count)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(
                    in_ch,
                    width,
                    stride,
                    cfg.shift_fraction,
                    cfg.frames,
                    cfg.init_std,
                    rng,
                ));
                in_ch = width;
            }
        }
        Ok(Self {
            stem_bn: BatchNorm::new(first),
            cfg,
            stem,
            pool,
            blocks,
            cache: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }

    /// `x` is `(C_in, N*T, H, W)`; returns per-frame features `(N*T, C)`.
    pub fn forward(&mut self, x: &Array4<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        let (c, b, h, w) = x.dim();
        if c != self.cfg.input_channels || (h, w) != self.cfg.spatial_in {
            return Err(shape_err(
                "stream input",
                (self.cfg.input_channels, self.cfg.spatial_in),
                (c, (h, w)),
            ));
        }
        if b % self.cfg.frames != 0 {
            return Err(shape_err("stream frame count", format!("multiple of {}", self.cfg.frames), b));
        }
        let stem_out = relu(&self.stem_bn.forward4(&self.stem.forward(x, ctx)?, ctx)?);
        let mut act = match &mut self.pool {
            Some(pool) => pool.forward(&stem_out, ctx),
            None => stem_out.clone(),
        };
        for block in &mut self.blocks {
            act = block.forward(&act, ctx)?;
        }
        let (_, _, gh, gw) = act.dim();
        if ctx.record {
            self.cache = Some(StreamCache {
                stem_out,
                grid: (gh, gw),
            });
        }
        Ok(global_avg_pool(&act))
    }

    /// Backpropagates per-frame feature gradients `(N*T, C)` into the
    /// stream parameters.
    pub fn backward(&mut self, dfeat: &Array2<f64>) {
        let cache = self.cache.take().expect("stream backward without recorded forward");
        let mut d = global_avg_pool_backward(dfeat, cache.grid.0, cache.grid.1);
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
        if let Some(pool) = &mut self.pool {
            d = pool.backward(&d);
        }
        let d = self.stem_bn.backward4(&relu_backward(&cache.stem_out, &d));
        self.stem.backward(&d, false);
    }
}

impl Module for Stream {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// Stacks `T x C x H x W` clips into the `(C, N*T, H, W)` batch layout.
pub fn batch_clips(clips: &[&Array4<f64>]) -> Result<Array4<f64>> {
    let first = clips.first().ok_or(Error::Empty("batch has no clips"))?;
    let (t, c, h, w) = first.dim();
    let mut out = Array4::zeros((c, clips.len() * t, h, w));
    for (n, clip) in clips.iter().enumerate() {
        if clip.dim() != (t, c, h, w) {
            return Err(shape_err("batch clip shape", (t, c, h, w), clip.dim()));
        }
        for f in 0..t {
            out.slice_mut(s![.., n * t + f, .., ..]).assign(&clip.index_axis(Axis(0), f));
        }
    }
    Ok(out)
}

/// Non-overlapping temporal mean over groups of `factor` frames.
pub fn temporal_avg_pool(f: &FeatureSeq, factor: usize) -> Result<FeatureSeq> {
    Ok(FeatureSeq {
        data: pool_rows(&f.data, factor)?,
    })
}

/// Row pooling on a `(N*T, C)` batch; groups never straddle clips as long as
/// `T` is a multiple of `factor`.
pub(crate) fn pool_rows(x: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (rows, c) = x.dim();
    if factor == 0 || rows % factor != 0 {
        return Err(shape_err("temporal pool", format!("frames divisible by {factor}"), rows));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let mut out = Array2::zeros((rows / factor, c));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for k in 0..factor {
            row += &x.row(i * factor + k);
        }
        row /= factor as f64;
    }
    Ok(out)
}

pub(crate) fn pool_rows_backward(dy: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor == 1 {
        return dy.clone();
    }
    let (rows, c) = dy.dim();
    Array2::from_shape_fn((rows * factor, c), |(r, j)| dy[[r / factor, j]] / factor as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shift_eighth_of_eight_channels() {
        let x = rand4((4, 8, 2, 2), 1);
        let y = temporal_shift(&x, 0.125);
        for t in 0..4 {
            for (yy, xx) in (0..2).zip(0..2) {
                let expect0 = if t == 0 { 0.0 } else { x[[t - 1, 0, yy, xx]] };
                let expect1 = if t == 3 { 0.0 } else { x[[t + 1, 1, yy, xx]] };
                assert_eq!(y[[t, 0, yy, xx]], expect0);
                assert_eq!(y[[t, 1, yy, xx]], expect1);
            }
            for c in 2..8 {
                assert_eq!(y.slice(s![t, c, .., ..]), x.slice(s![t, c, .., ..]));
            }
        }
        assert_eq!(temporal_shift(&x, 0.0), x);
    }

    #[test]
    fn batch_shift_matches_single_clip_shift() {
        let a = rand4((3, 16, 2, 3), 2);
        let b = rand4((3, 16, 2, 3), 3);
        let batch = batch_clips(&[&a, &b]).unwrap();
        let shifted = shift_batch(&batch, 3, 0.125, false);
        let expect = batch_clips(&[&temporal_shift(&a, 0.125), &temporal_shift(&b, 0.125)]).unwrap();
        assert_eq!(shifted, expect);
    }

    #[test]
    fn shift_adjoint_identity() {
        let x = rand4((8, 6, 2, 2), 4);
        let g = rand4((8, 6, 2, 2), 5);
        let lhs = (&shift_batch(&x, 3, 0.25, false) * &g).sum();
        let rhs = (&x * &shift_batch(&g, 3, 0.25, true)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_block_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ResidualBlock::new(4, 4, 1, 0.125, 2, 0.1, &mut rng);
        block.conv1.weight.value.fill(0.0);
        block.conv2.weight.value.fill(0.0);
        let x = rand4((4, 4, 3, 3), 6);
        let y = block.forward(&x, Ctx::TRAIN).unwrap();
        assert_eq!(y, relu(&x));
    }

    #[test]
    fn single_frame_block_zeroes_shifted_groups() {
        let x = rand4((8, 1, 3, 3), 7);
        let shifted = shift_batch(&x, 1, 0.125, false);
        assert!(shifted.slice(s![0..2, .., .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(shifted.slice(s![2.., .., .., ..]), x.slice(s![2.., .., .., ..]));
    }

    #[test]
    fn temporal_pool_cases() {
        let f = FeatureSeq {
            data: Array2::from_shape_fn((4, 2), |(t, c)| (t * 2 + c) as f64),
        };
        assert_eq!(temporal_avg_pool(&f, 1).unwrap(), f);
        let p = temporal_avg_pool(&f, 4).unwrap();
        assert_eq!(p.data, ndarray::arr2(&[[3.0, 4.0]]));
        let c = FeatureSeq {
            data: Array2::from_elem((6, 3), 1.5),
        };
        assert_eq!(temporal_avg_pool(&c, 3).unwrap().data, Array2::from_elem((2, 3), 1.5));
        assert!(temporal_avg_pool(&c, 4).is_err());
    }

    fn toy(kind: StreamKind, input_channels: usize, size: usize) -> StreamConfig {
        StreamConfig {
            kind,
            stage_widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            shift_fraction: 0.125,
            input_channels,
            spatial_in: (size, size),
            frames: 2,
            stem_kernel: 7,
            init_std: 0.1,
        }
    }

    #[test]
    fn stream_output_shape_and_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut app = Stream::new(toy(StreamKind::Appearance, 3, 32), &mut rng).unwrap();
        let mut pose = Stream::new(toy(StreamKind::Pose, 5, 8), &mut rng).unwrap();
        assert_eq!(app.cfg.final_grid(), pose.cfg.final_grid());
        let fa = app.forward(&rand4((3, 4, 32, 32), 9), Ctx::TRAIN).unwrap();
        let fp = pose.forward(&rand4((5, 4, 8, 8), 10), Ctx::EVAL).unwrap();
        assert_eq!(fa.dim(), (4, 16));
        assert_eq!(fp.dim(), (4, 16));
        assert!(fa.iter().chain(fp.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn full_scale_grids_agree() {
        let mut a = toy(StreamKind::Appearance, 3, 224);
        a.stage_widths = vec![64, 128, 256, 512];
        a.blocks_per_stage = vec![2, 2, 2, 2];
        let mut p = a.clone();
        p.kind = StreamKind::Pose;
        p.spatial_in = (56, 56);
        assert_eq!(a.stage_input_size(), (56, 56));
        assert_eq!(a.final_grid(), (7, 7));
        assert_eq!(p.final_grid(), (7, 7));
    }

    #[test]
    fn stream_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = Stream::new(toy(StreamKind::Pose, 5, 8), &mut rng).unwrap();
        assert!(s.forward(&rand4((4, 4, 8, 8), 1), Ctx::EVAL).is_err());
        assert!(s.forward(&rand4((5, 3, 8, 8), 1), Ctx::EVAL).is_err());
        let mut bad = toy(StreamKind::Pose, 5, 8);
        bad.shift_fraction = 0.6;
        assert!(Stream::new(bad, &mut rng).is_err());
    }
}
