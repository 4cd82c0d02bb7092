//! Every comparison variant evaluated against one pair of stream checkpoints.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{build_banks, load_streams, predict_bank, seeded_rng, train_integrator, Checkpoint, IntegratorOptions, MetricsReport, StreamBanks};
use crate::config::Config;
use crate::data::FeatureBank;
use crate::error::{Error, Result};
use crate::integrator::GateSource;
use crate::model::{Model, ModelConfig, Variant};
use crate::synth::VideoDescriptor;

/// Pre-trained single-stream checkpoints.
#[derive(Clone, Debug, Default)]
pub struct StreamCheckpoints {
    pub appearance: Option<Checkpoint>,
    pub pose: Option<Checkpoint>,
}

impl StreamCheckpoints {
    pub fn require(&self) -> Result<(&Checkpoint, &Checkpoint)> {
        let a = self.appearance.as_ref().ok_or(Error::Missing("appearance stream checkpoint (run train-stream --kind appearance)".into()))?;
        let p = self.pose.as_ref().ok_or(Error::Missing("pose stream checkpoint (run train-stream --kind pose)".into()))?;
        Ok((a, p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: Variant,
    pub lambda: Option<f64>,
    pub gate_source: Option<GateSource>,
    pub score_weight: Option<f64>,
    pub in_context: MetricsReport,
    pub out_of_context: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Top-1 when a video counts as correct if either stream gets it right.
    pub oracle_in_context: f64,
    pub oracle_out_of_context: f64,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn save(&self, dir: &Path, num_classes: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(dir.join("ablation.json"))?), self)?;
        let mut reports: Vec<MetricsReport> = self
            .rows
            .iter()
            .flat_map(|r| [r.in_context.clone(), r.out_of_context.clone()])
            .collect();
        for (split, top1) in [("val_in_context", self.oracle_in_context), ("val_out_of_context", self.oracle_out_of_context)] {
            reports.push(MetricsReport {
                name: "oracle".into(),
                split: split.into(),
                num_videos: reports.first().map_or(0, |r| r.num_videos),
                top1,
                top5: f64::NAN,
                top_k: 0,
                per_class_top1: Default::default(),
                gate_mean: None,
                gate_var: None,
                per_class_gate_mean: None,
            });
        }
        super::write_reports_csv(&dir.join("ablation.csv"), &reports, num_classes)
    }
}

/// Lambda values swept for the integral variant.
pub const LAMBDA_SWEEP: [f64; 4] = [0.0, 1.0, 1.5, 5.0];

fn row(name: String, model: &mut Model, banks: &StreamBanks, num_classes: usize) -> Result<AblationRow> {
    let eval = |model: &mut Model, bank: &FeatureBank, split: &str| -> Result<MetricsReport> {
        let preds = predict_bank(model, bank)?;
        Ok(MetricsReport::from_predictions(&name, split, &preds, num_classes))
    };
    let in_context = eval(model, &banks.val_in, "val_in_context")?;
    let out_of_context = eval(model, &banks.val_out, "val_out_of_context")?;
    info!("{name}: in {:.1} out {:.1}", in_context.top1, out_of_context.top1);
    let v = model.variant();
    Ok(AblationRow {
        variant: v,
        lambda: v.is_gated().then_some(model.cfg.lambda),
        gate_source: model.integrator.as_ref().filter(|_| v.is_gated()).map(|i| i.cfg.gate_source),
        score_weight: (v == Variant::ScoreAverage).then_some(model.cfg.score_weight),
        name,
        in_context,
        out_of_context,
    })
}

/// Runs all comparison variants on frozen features from `streams`:
/// single streams, score averaging (`w = 0, 0.1, .., 1`), feature
/// concatenation, the ungated sum, the integral model over the lambda sweep
/// and each gate source, plus the oracle.
pub fn ablation_suite(
    cfg: &Config,
    streams: &StreamCheckpoints,
    train: &[VideoDescriptor],
    val_in: &[VideoDescriptor],
    val_out: &[VideoDescriptor],
) -> Result<AblationReport> {
    streams.require()?;
    let k = cfg.model.num_classes;
    let mut rng = seeded_rng(cfg.train.seed, 4);
    let both = ModelConfig {
        variant: Variant::NoGate,
        ..cfg.model.clone()
    };
    let mut encoder = load_streams(cfg, both, streams, &mut rng)?;
    info!("encoding feature banks");
    let banks = build_banks(&mut encoder, cfg, train, val_in, val_out)?;
    let mut rows = Vec::new();

    let mut single = |variant: Variant, w: Option<f64>| -> Result<Model> {
        let mcfg = ModelConfig {
            variant,
            score_weight: w.unwrap_or(cfg.model.score_weight),
            ..cfg.model.clone()
        };
        load_streams(cfg, mcfg, streams, &mut rng)
    };
    let mut app = single(Variant::AppearanceOnly, None)?;
    let mut pose = single(Variant::PoseOnly, None)?;
    rows.push(row("appearance_only".into(), &mut app, &banks, k)?);
    rows.push(row("pose_only".into(), &mut pose, &banks, k)?);
    for i in 0..=10 {
        let w = i as f64 / 10.0;
        let mut m = single(Variant::ScoreAverage, Some(w))?;
        rows.push(row(format!("score_average_w{w:.1}"), &mut m, &banks, k)?);
    }

    let labels_in: Vec<usize> = val_in.iter().map(|v| v.action).collect();
    let labels_out: Vec<usize> = val_out.iter().map(|v| v.action).collect();
    let oracle_in_context = super::oracle_selection(&predict_bank(&mut app, &banks.val_in)?, &predict_bank(&mut pose, &banks.val_in)?, &labels_in)?;
    let oracle_out_of_context = super::oracle_selection(&predict_bank(&mut app, &banks.val_out)?, &predict_bank(&mut pose, &banks.val_out)?, &labels_out)?;

    let trained = |name: String, opts: IntegratorOptions| -> Result<AblationRow> {
        info!("training {name}");
        let run = train_integrator(cfg, streams, train, val_in, &opts, Some(&banks))?;
        let mut m = run.checkpoint.build_model()?;
        row(name, &mut m, &banks, k)
    };
    let base = IntegratorOptions::from_config(cfg);
    for variant in [Variant::FeatureFuse, Variant::NoGate] {
        rows.push(trained(variant.name().into(), IntegratorOptions { variant, ..base.clone() })?);
    }
    for lambda in LAMBDA_SWEEP {
        let opts = IntegratorOptions {
            variant: Variant::Integral,
            lambda,
            ..base.clone()
        };
        rows.push(trained(format!("integral_lambda{lambda:.1}"), opts)?);
    }
    for source in [GateSource::Pose, GateSource::Appearance, GateSource::Both] {
        let opts = IntegratorOptions {
            variant: Variant::Integral,
            gate_source: source,
            ..base.clone()
        };
        rows.push(trained(format!("integral_gate_{}", source.name()), opts)?);
    }
    Ok(AblationReport {
        rows,
        oracle_in_context,
        oracle_out_of_context,
    })
}
