//! Feature alignment, pose-driven channel gating and gated aggregation.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureSeq;
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, relu, relu_backward, BatchNorm, Ctx, LayerNorm, Linear, Module, Param};

/// Gate values are kept inside `[GATE_EPS, 1 - GATE_EPS]` so the
/// regularizer stays finite.
pub const GATE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateSource {
    #[default]
    Pose,
    Appearance,
    Both,
}

impl GateSource {
    pub fn name(self) -> &'static str {
        match self {
            GateSource::Pose => "pose",
            GateSource::Appearance => "appearance",
            GateSource::Both => "both",
        }
    }

    pub fn input_width(self, c_a: usize, c_p: usize) -> usize {
        match self {
            GateSource::Pose => c_p,
            GateSource::Appearance => c_a,
            GateSource::Both => c_a + c_p,
        }
    }
}

impl std::str::FromStr for GateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose" => Ok(GateSource::Pose),
            "appearance" => Ok(GateSource::Appearance),
            "both" => Ok(GateSource::Both),
            other => Err(Error::Config(format!("unknown gate source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    /// Common channel width `C` of the aligned features and the gate.
    pub common_width: usize,
    pub gate_source: GateSource,
    pub init_std: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            common_width: 512,
            gate_source: GateSource::Pose,
            init_std: 0.001,
        }
    }
}

/// Per-frame, per-channel gate `G`, shape `T x C`, entries in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    pub data: Array2<f64>,
}

impl GateMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::Config("gate entries must lie strictly inside (0, 1)".into()));
        }
        Ok(Self { data })
    }

    pub fn constant(frames: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((frames, channels), value))
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

fn check_same(context: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(context, a.dim(), b.dim()));
    }
    Ok(())
}

/// `F = G * F_A' + (1 - G) * F_P'`, elementwise.
pub fn integrate(fa: &FeatureSeq, fp: &FeatureSeq, g: &GateMatrix) -> Result<FeatureSeq> {
    Ok(FeatureSeq {
        data: gated_sum(&fa.data, &fp.data, &g.data)?,
    })
}

pub(crate) fn gated_sum(fa: &Array2<f64>, fp: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
    check_same("integrate appearance/pose", fa, fp)?;
    check_same("integrate feature/gate", fa, g)?;
    Ok(g * fa + &((1.0 - g) * fp))
}

/// Plain sum of the aligned features (the ungated baseline).
pub fn no_gate_integrate(fa: &FeatureSeq, fp: &FeatureSeq) -> Result<FeatureSeq> {
    check_same("ungated integrate", &fa.data, &fp.data)?;
    Ok(FeatureSeq {
        data: &fa.data + &fp.data,
    })
}

/// Mean of `-ln(1 - g)` over all entries.
pub fn gate_regularizer(g: &GateMatrix) -> f64 {
    gate_penalty(&g.data)
}

pub(crate) fn gate_penalty(g: &Array2<f64>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.iter().map(|&v| -(-v).ln_1p()).sum::<f64>() / g.len() as f64
}

/// Gradient of [`gate_regularizer`]: `1 / ((1 - g) * T * C)`.
pub fn gate_regularizer_grad(g: &GateMatrix) -> Array2<f64> {
    let n = g.data.len() as f64;
    g.data.mapv(|v| 1.0 / ((1.0 - v) * n))
}

/// Temporal alignment block: per-frame linear map, layer norm over channels,
/// ReLU.
#[derive(Clone, Debug)]
pub struct Tcb {
    pub linear: Linear,
    pub norm: LayerNorm,
    out: Option<Array2<f64>>,
}

impl Tcb {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(in_dim, out_dim, init_std, rng),
            norm: LayerNorm::new(out_dim),
            out: None,
        }
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        let h = self.linear.forward(x, ctx)?;
        let out = relu(&self.norm.forward(h.view(), ctx)?);
        if ctx.record {
            self.out = Some(out.clone());
        }
        Ok(out)
    }

    pub fn align(&mut self, f: &FeatureSeq) -> Result<FeatureSeq> {
        Ok(FeatureSeq {
            data: self.forward(f.data.view(), Ctx::EVAL)?,
        })
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let out = self.out.take().expect("alignment backward without recorded forward");
        let dh = self.norm.backward(relu_backward(&out, dy).view());
        self.linear.backward(dh.view())
    }
}

impl Module for Tcb {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Gating block: per-frame linear map, batch norm over rows, clamped sigmoid.
#[derive(Clone, Debug)]
pub struct Cgb {
    pub linear: Linear,
    pub norm: BatchNorm,
    out: Option<Array2<f64>>,
}

impl Cgb {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(in_dim, out_dim, init_std, rng),
            norm: BatchNorm::new(out_dim),
            out: None,
        }
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        let h = self.linear.forward(x, ctx)?;
        let z = self.norm.forward_rows(h.view(), ctx)?;
        let g = z.mapv(|v| (1.0 / (1.0 + (-v).exp())).clamp(GATE_EPS, 1.0 - GATE_EPS));
        if ctx.record {
            self.out = Some(g.clone());
        }
        Ok(g)
    }

    pub fn compute_gate(&mut self, source: &FeatureSeq, training: bool) -> Result<GateMatrix> {
        let ctx = if training { Ctx::TRAIN } else { Ctx::EVAL };
        Ok(GateMatrix {
            data: self.forward(source.data.view(), ctx)?,
        })
    }

    pub fn backward(&mut self, dg: &Array2<f64>) -> Array2<f64> {
        let g = self.out.take().expect("gate backward without recorded forward");
        // clamped entries pass no gradient
        let dz = ndarray::Zip::from(&g).and(dg).map_collect(|&g, &d| {
            if g <= GATE_EPS || g >= 1.0 - GATE_EPS {
                0.0
            } else {
                d * g * (1.0 - g)
            }
        });
        let dh = self.norm.backward_rows(dz.view());
        self.linear.backward(dh.view())
    }
}

impl Module for Cgb {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Result of one integrator pass over a batch of frame rows.
#[derive(Clone, Debug)]
pub struct Integrated {
    pub fused: Array2<f64>,
    /// `None` for the ungated sum.
    pub gate: Option<Array2<f64>>,
}

/// The two alignment blocks plus the optional gating block.
#[derive(Clone, Debug)]
pub struct Integrator {
    pub cfg: IntegratorConfig,
    pub tcb_a: Tcb,
    pub tcb_p: Tcb,
    pub cgb: Option<Cgb>,
    cache: Option<IntegratorCache>,
}

#[derive(Clone, Debug)]
struct IntegratorCache {
    fa: Array2<f64>,
    fp: Array2<f64>,
    gate: Option<Array2<f64>>,
}

impl Integrator {
    pub fn new<R: Rng + ?Sized>(
        cfg: IntegratorConfig,
        c_a: usize,
        c_p: usize,
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.common_width == 0 {
            return Err(Error::Config("integrator common_width must be >= 1".into()));
        }
        let c = cfg.common_width;
        let tcb_a = Tcb::new(c_a, c, cfg.init_std, rng);
        let tcb_p = Tcb::new(c_p, c, cfg.init_std, rng);
        let cgb = gated.then(|| Cgb::new(cfg.gate_source.input_width(c_a, c_p), c, cfg.init_std, rng));
        Ok(Self {
            cfg,
            tcb_a,
            tcb_p,
            cgb,
            cache: None,
        })
    }

    fn gate_input(&self, fa: &Array2<f64>, fp: &Array2<f64>) -> Array2<f64> {
        match self.cfg.gate_source {
            GateSource::Pose => fp.clone(),
            GateSource::Appearance => fa.clone(),
            GateSource::Both => concatenate![Axis(1), *fa, *fp],
        }
    }

    /// `fa` and `fp` hold frame rows `(N*T, C_A)` and `(N*T, C_P)`; the pose
    /// rows must already be temporally pooled to the appearance rate.
    pub fn forward(&mut self, fa: &Array2<f64>, fp: &Array2<f64>, ctx: Ctx) -> Result<Integrated> {
        if fa.nrows() != fp.nrows() {
            return Err(shape_err("integrator frame rows", fa.nrows(), fp.nrows()));
        }
        let gate = match &mut self.cgb {
            Some(_) => {
                let src = self.gate_input(fa, fp);
                Some(self.cgb.as_mut().expect("gated").forward(src.view(), ctx)?)
            }
            None => None,
        };
        let fa_al = self.tcb_a.forward(fa.view(), ctx)?;
        let fp_al = self.tcb_p.forward(fp.view(), ctx)?;
        let fused = match &gate {
            Some(g) => gated_sum(&fa_al, &fp_al, g)?,
            None => &fa_al + &fp_al,
        };
        if ctx.record {
            self.cache = Some(IntegratorCache {
                fa: fa_al,
                fp: fp_al,
                gate: gate.clone(),
            });
        }
        Ok(Integrated { fused, gate })
    }

    /// Backward from `d_fused` plus an extra direct gradient on the gate
    /// (the regularizer term). Returns gradients for the raw `(fa, fp)` rows.
    pub fn backward(&mut self, d_fused: &Array2<f64>, d_gate: Option<&Array2<f64>>) -> (Array2<f64>, Array2<f64>) {
        let cache = self.cache.take().expect("integrator backward without recorded forward");
        let (d_fa_al, d_fp_al) = match &cache.gate {
            Some(g) => (d_fused * g, d_fused * &(1.0 - g)),
            None => (d_fused.clone(), d_fused.clone()),
        };
        let mut d_fa = self.tcb_a.backward(&d_fa_al);
        let mut d_fp = self.tcb_p.backward(&d_fp_al);
        if let (Some(_), Some(cgb)) = (&cache.gate, &mut self.cgb) {
            let mut dg = d_fused * &(&cache.fa - &cache.fp);
            if let Some(extra) = d_gate {
                dg += extra;
            }
            let d_src = cgb.backward(&dg);
            match self.cfg.gate_source {
                GateSource::Pose => d_fp += &d_src,
                GateSource::Appearance => d_fa += &d_src,
                GateSource::Both => {
                    let ca = d_fa.ncols();
                    d_fa += &d_src.slice(ndarray::s![.., ..ca]);
                    d_fp += &d_src.slice(ndarray::s![.., ca..]);
                }
            }
        }
        (d_fa, d_fp)
    }
}

impl Module for Integrator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.tcb_a.visit(&join(prefix, "tcb_a"), f);
        self.tcb_p.visit(&join(prefix, "tcb_p"), f);
        if let Some(c) = &self.cgb {
            c.visit(&join(prefix, "cgb"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.tcb_a.visit_mut(&join(prefix, "tcb_a"), f);
        self.tcb_p.visit_mut(&join(prefix, "tcb_p"), f);
        if let Some(c) = &mut self.cgb {
            c.visit_mut(&join(prefix, "cgb"), f);
        }
    }
}
