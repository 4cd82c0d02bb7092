//! Command-line driver. Every subcommand works inside a run directory:
//!
//! ```text
//! <workdir>/config.json
//! <workdir>/manifests/{train,val_in_context,val_out_of_context}.jsonl
//! <workdir>/checkpoints/*.iack
//! <workdir>/reports/*.{json,csv,png}
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use posegate::backbone::StreamKind;
use posegate::config::Config;
use posegate::integrator::GateSource;
use posegate::model::Variant;
use posegate::pose_codec::{encode_pose_clip, read_pose_ndjson, write_pose_ndjson, Skeleton};
use posegate::synth::{generate_video, load_manifest, make_dataset, save_manifest, write_video_container, Split, VideoDescriptor};
use posegate::train_eval::{
    ablation_suite, evaluate, gate_statistics, train_integrator, train_stream, write_gate_csv, write_gate_histogram,
    Checkpoint, IntegratorOptions, StreamCheckpoints,
};

#[derive(Parser)]
#[command(name = "posegate", version, about = "Gated appearance/pose action recognition on synthetic videos")]
struct Cli {
    /// Run directory holding manifests, checkpoints and reports.
    #[arg(long, global = true, default_value = "run")]
    workdir: PathBuf,
    /// Configuration file (defaults to <workdir>/config.json, then the toy preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    In,
    Out,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::In => Split::ValInContext,
            SplitArg::Out => Split::ValOutOfContext,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes the three synthetic split manifests and the resolved config.
    MakeDataset {
        /// Also write every video's pose detections as NDJSON.
        #[arg(long)]
        write_poses: bool,
        /// Also write every video's frames as AVC1 containers.
        #[arg(long)]
        write_videos: bool,
    },
    /// Encodes a pose NDJSON file into a PTC1 heatmap/PAF clip.
    Encode {
        poses: PathBuf,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Pre-trains one single-stream model.
    TrainStream {
        #[arg(long)]
        kind: StreamKind,
    },
    /// Trains the integration stage on top of the stream checkpoints.
    TrainIntegrator {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        gate_source: Option<GateSource>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Fine-tune the streams too.
        #[arg(long)]
        no_freeze: bool,
        /// Start from random streams.
        #[arg(long)]
        no_pretrain: bool,
        /// Output checkpoint (defaults to checkpoints/integrator.iack).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a checkpoint on one validation split.
    Evaluate {
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Runs every comparison variant on both validation splits.
    Ablate,
    /// Per-video gate means on both validation splits.
    GateStats {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also render a histogram PNG.
        #[arg(long)]
        histogram: bool,
    },
}

struct Run {
    dir: PathBuf,
    cfg: Config,
}

impl Run {
    fn open(cli: &Cli) -> Result<Self> {
        let default_cfg = cli.workdir.join("config.json");
        let mut cfg = match &cli.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if default_cfg.exists() => Config::load(&default_cfg)?,
            None => Config::toy(),
        };
        if let Some(s) = cli.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            dir: cli.workdir.clone(),
            cfg,
        })
    }

    fn sub(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    fn manifest(&self, split: Split) -> Result<Vec<VideoDescriptor>> {
        let p = self.dir.join("manifests").join(format!("{}.jsonl", split.name()));
        if !p.exists() {
            bail!("{} not found (run make-dataset first)", p.display());
        }
        Ok(load_manifest(&p)?)
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn streams(&self) -> Result<StreamCheckpoints> {
        let load = |kind: &str| -> Result<Option<Checkpoint>> {
            let p = self.checkpoint_path(&format!("stream_{kind}.iack"));
            Ok(if p.exists() { Some(Checkpoint::load(&p)?) } else { None })
        };
        Ok(StreamCheckpoints {
            appearance: load("appearance")?,
            pose: load("pose")?,
        })
    }
}

fn make_dataset_cmd(run: &Run, write_poses: bool, write_videos: bool) -> Result<()> {
    let manifests = run.sub("manifests")?;
    run.cfg.save(&run.dir.join("config.json"))?;
    for split in Split::ALL {
        let videos = make_dataset(split, &run.cfg.synth, run.cfg.train.seed)?;
        save_manifest(&manifests.join(format!("{}.jsonl", split.name())), &videos)?;
        info!("{}: {} videos", split.name(), videos.len());
        if !(write_poses || write_videos) {
            continue;
        }
        let poses = run.sub("poses")?;
        let frames = run.sub("videos")?;
        for v in &videos {
            let video = generate_video(v.action, v.context, v.seed, &run.cfg.synth)?;
            if write_poses {
                write_pose_ndjson(&video.pose_frames, BufWriter::new(File::create(poses.join(format!("{}.ndjson", v.video_id)))?))?;
            }
            if write_videos {
                write_video_container(BufWriter::new(File::create(frames.join(format!("{}.avc1", v.video_id)))?), &video.appearance_frames)?;
            }
        }
    }
    if write_poses {
        serde_json::to_writer_pretty(File::create(run.dir.join("poses").join("skeleton.json"))?, &run.cfg.skeleton())?;
    }
    Ok(())
}

fn save_report(dir: &Path, report: &posegate::train_eval::MetricsReport, k: usize) -> Result<()> {
    let stem = format!("{}_{}", report.name, report.split);
    report.save_json(&dir.join(format!("{stem}.json")))?;
    report.save_csv(&dir.join(format!("{stem}.csv")), k)?;
    println!("{stem}: top1 {:.2} top{} {:.2}", report.top1, report.top_k, report.top5);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::Encode { poses, skeleton, out } = &cli.command {
        let cfg = Run::open(&cli).map(|r| r.cfg).unwrap_or_else(|_| Config::toy());
        let skeleton = match skeleton {
            Some(p) => Skeleton::from_json_file(p)?,
            None => cfg.skeleton(),
        };
        let frames = read_pose_ndjson(BufReader::new(File::open(poses)?))?;
        let clip = encode_pose_clip(&frames, &skeleton, &cfg.codec)?;
        clip.save(out)?;
        println!("{}: {:?}", out.display(), clip.data.dim());
        return Ok(());
    }
    let run = Run::open(&cli)?;
    let k = run.cfg.model.num_classes;
    match cli.command {
        Command::Encode { .. } => unreachable!(),
        Command::MakeDataset { write_poses, write_videos } => make_dataset_cmd(&run, write_poses, write_videos)?,
        Command::TrainStream { kind } => {
            let result = train_stream(kind, &run.cfg, &run.manifest(Split::Train)?, &run.manifest(Split::ValInContext)?)?;
            run.sub("checkpoints")?;
            let path = run.checkpoint_path(&format!("stream_{}.iack", kind.name()));
            result.checkpoint.save(&path)?;
            println!("saved {} (best epoch {:?})", path.display(), result.best_epoch);
        }
        Command::TrainIntegrator { lambda, gate_source, variant, no_freeze, no_pretrain, out } => {
            let mut opts = IntegratorOptions::from_config(&run.cfg);
            opts.lambda = lambda.unwrap_or(opts.lambda);
            opts.gate_source = gate_source.unwrap_or(opts.gate_source);
            opts.variant = variant.unwrap_or(opts.variant);
            opts.freeze = !no_freeze;
            opts.pretrain = !no_pretrain;
            let streams = if opts.pretrain { run.streams()? } else { StreamCheckpoints::default() };
            let result = train_integrator(
                &run.cfg,
                &streams,
                &run.manifest(Split::Train)?,
                &run.manifest(Split::ValInContext)?,
                &opts,
                None,
            )?;
            run.sub("checkpoints")?;
            let path = out.unwrap_or_else(|| run.checkpoint_path("integrator.iack"));
            result.checkpoint.save(&path)?;
            println!("saved {} (best epoch {:?})", path.display(), result.best_epoch);
        }
        Command::Evaluate { split, checkpoint, clips } => {
            let path = checkpoint.unwrap_or_else(|| run.checkpoint_path("integrator.iack"));
            let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let mut model = ckpt.build_model()?;
            let split = split.split();
            let clips = clips.unwrap_or(run.cfg.sampling.eval_clips);
            let name = model.variant().name();
            let (report, _) = evaluate(&mut model, &run.cfg, &run.manifest(split)?, clips, name, split.name())?;
            save_report(&run.sub("reports")?, &report, k)?;
        }
        Command::Ablate => {
            let report = ablation_suite(
                &run.cfg,
                &run.streams()?,
                &run.manifest(Split::Train)?,
                &run.manifest(Split::ValInContext)?,
                &run.manifest(Split::ValOutOfContext)?,
            )?;
            let dir = run.sub("reports")?;
            report.save(&dir, k)?;
            for r in &report.rows {
                println!("{:28} in {:6.2}  out {:6.2}", r.name, r.in_context.top1, r.out_of_context.top1);
            }
            println!("{:28} in {:6.2}  out {:6.2}", "oracle", report.oracle_in_context, report.oracle_out_of_context);
        }
        Command::GateStats { checkpoint, histogram } => {
            let path = checkpoint.unwrap_or_else(|| run.checkpoint_path("integrator.iack"));
            let mut model = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?.build_model()?;
            let dir = run.sub("reports")?;
            let mut rows = Vec::new();
            let mut series = Vec::new();
            let mut summary = serde_json::Map::new();
            for split in [Split::ValInContext, Split::ValOutOfContext] {
                let videos = run.manifest(split)?;
                let (stats, _) = gate_statistics(&mut model, &run.cfg, &videos)?;
                println!("{}: gate mean {:.4} variance {:.6}", split.name(), stats.mean, stats.variance);
                for (v, &g) in videos.iter().zip(&stats.per_video) {
                    rows.push((v.video_id.clone(), v.action, v.context, split.name().to_string(), g));
                }
                series.push((split.name(), stats.per_video.clone()));
                summary.insert(split.name().into(), serde_json::to_value(&stats)?);
            }
            write_gate_csv(&dir.join("gates.csv"), &rows)?;
            serde_json::to_writer_pretty(File::create(dir.join("gate_stats.json"))?, &summary)?;
            if histogram {
                let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (*n, v.as_slice())).collect();
                write_gate_histogram(&dir.join("gates.png"), &refs, 50)?;
            }
        }
    }
    Ok(())
}
