mod config;
mod viz;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fmtrack_core::adapt::{encode_video, train_adaptation};
use fmtrack_core::io::manifest::check_pairing;
use fmtrack_core::io::{
    load_dataset, read_annotations, read_checkpoint, read_predictions, write_annotations, write_checkpoint,
    AnnotationSet, Checkpoint, CheckpointKind, DatasetKind, DatasetVideo, Split,
};
use fmtrack_core::metrics::{evaluate_queried_first, EvalMode, MetricsReport, Pooling};
use fmtrack_core::optim::OptimConfig;
use fmtrack_core::predict::{evaluate, first_visible_query, predict_dataset, predict_probe, predict_zero_shot, probe_track};
use fmtrack_core::probe::{probe_forward_with, probe_init, ProbeConfig, ProbeParams};
use fmtrack_core::synth::{synth_generate, SyntheticConfig};
use fmtrack_core::synth_images::{synth_images, ImageSynthConfig};
use fmtrack_core::tensor::{argmax2d, Point};
use fmtrack_core::tracker::{correlation_volume, FeatureVideo, Query};
use fmtrack_core::train::{train_probe, TrainHistory};
use fmtrack_core::vit::LoRAViTParams;
use fmtrack_core::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::viz::{render_heatmap, Marker, Shape};

#[derive(Parser, Debug)]
#[command(name = "fmtrack", version, about = "Point tracking over dense feature maps")]
struct Cli {
    /// Seed for initialization and shuffling (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serialize all reductions. Execution is single-threaded, so results are
    /// reproducible with or without this flag; it is recorded in reports.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Frame,
    Video,
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Dataset directory (holds manifest.json).
    #[arg(long)]
    features: PathBuf,
    /// Annotation file replacing the one named in the manifest.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Resample feature maps to R x R cells.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (features by default, RGB frames with --images).
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: bool,
    },
    /// Zero-shot argmax tracking; reports δ_avg over visible points.
    EvalZeroshot {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the probe heads on frozen features (train split; val split for reports).
    TrainProbe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// LoRA adaptation of the toy ViT on an image dataset, co-training the probe.
    TrainAdapt {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = ["16", "32", "64"])]
        rank: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Position accuracy only (predictions without occlusion estimates).
        #[arg(long)]
        zero_shot: bool,
        #[arg(long, value_enum, default_value = "frame")]
        pooling: PoolingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame correlation heatmaps (PPM) for one query.
    Viz {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        video: String,
        /// Track whose first visible point is the query.
        #[arg(long, default_value_t = 0)]
        track: usize,
        /// Probe or adapted checkpoint; without one the argmax is shown.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage/config, 2 data, 3 numerical.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::TrainingFault { .. } | Error::InvalidState(_) => 3,
        Error::InvalidInput(_)
        | Error::CorruptFile { .. }
        | Error::Incompatible(_)
        | Error::TypeMismatch { .. }
        | Error::Schema(_)
        | Error::UndefinedMetric(_)
        | Error::Io(_) => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let run = RunInfo {
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::GenSynth { out, images } => gen_synth(&cfg, &run, &out, images),
        Command::EvalZeroshot { data, split, out } => eval_zeroshot(&data, split, out.as_deref()),
        Command::TrainProbe { data, out } => train_probe_cmd(&cfg, &run, &data, &out),
        Command::TrainAdapt { data, rank, out } => train_adapt_cmd(&cfg, &run, &data, rank, &out),
        Command::Eval {
            predictions,
            annotations,
            zero_shot,
            pooling,
            out,
        } => eval_cmd(&predictions, &annotations, zero_shot, pooling, out.as_deref()),
        Command::Viz {
            data,
            video,
            track,
            checkpoint,
            out,
        } => viz_cmd(&cfg, &data, &video, track, checkpoint.as_deref(), &out),
    }
}

struct RunInfo {
    seed: Option<u64>,
    deterministic: bool,
}

fn load(data: &DataArgs) -> Result<(DatasetKind, Vec<DatasetVideo>)> {
    let (manifest, mut videos) = load_dataset(&data.features)?;
    if let Some(path) = &data.annotations {
        let set = read_annotations(path)?;
        for v in &mut videos {
            v.annotation = set
                .video(&v.id)
                .ok_or_else(|| Error::Schema(format!("{}: no annotations for video {}", path.display(), v.id)))?
                .clone();
            check_pairing(&v.video, &v.annotation)?;
        }
    }
    if let Some(r) = data.resolution {
        if manifest.kind == DatasetKind::Images {
            return Err(Error::InvalidConfig(
                "--resolution applies to feature datasets; image datasets use the backbone grid".into(),
            ));
        }
        for v in &mut videos {
            v.video = v.video.resized(r)?;
        }
    }
    Ok((manifest.kind, videos))
}

fn require_kind(kind: DatasetKind, want: DatasetKind, cmd: &str) -> Result<()> {
    if kind != want {
        let name = |k| if k == DatasetKind::Features { "features" } else { "images" };
        return Err(Error::InvalidInput(format!(
            "{cmd} needs a {} dataset, got {}",
            name(want),
            name(kind)
        )));
    }
    Ok(())
}

fn split_videos(videos: Vec<DatasetVideo>) -> (Vec<DatasetVideo>, Vec<DatasetVideo>) {
    videos.into_iter().partition(|v| v.split == Split::Train)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_synth(cfg: &RunConfig, run: &RunInfo, out: &Path, images: bool) -> Result<()> {
    if cfg.synth.is_some() && cfg.synth_images.is_some() {
        return Err(Error::InvalidConfig("give either [synth] or [synth_images], not both".into()));
    }
    let seed = run.seed.or(cfg.seed);
    let manifest = if images || cfg.synth_images.is_some() {
        let mut c = cfg.synth_images.clone().unwrap_or_else(ImageSynthConfig::default);
        if let Some(s) = seed {
            c.seed = s;
        }
        synth_images(&c)?.write(out)?
    } else {
        let mut c = cfg.synth.clone().unwrap_or_else(SyntheticConfig::default);
        if let Some(s) = seed {
            c.seed = s;
        }
        synth_generate(&c)?.write(out)?
    };
    println!("wrote {} videos to {}", manifest.videos.len(), out.display());
    Ok(())
}

fn eval_zeroshot(data: &DataArgs, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let (kind, videos) = load(data)?;
    require_kind(kind, DatasetKind::Features, "eval-zeroshot")?;
    let videos: Vec<_> = videos
        .into_iter()
        .filter(|v| match split {
            SplitArg::All => true,
            SplitArg::Train => v.split == Split::Train,
            SplitArg::Val => v.split == Split::Val,
        })
        .collect();
    if videos.is_empty() {
        return Err(Error::InvalidInput("no videos in the selected split".into()));
    }
    let pred = predict_zero_shot(&videos)?;
    let report = evaluate(&videos, &pred, EvalMode::ZeroShot, Pooling::Frame)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_annotations(dir.join("predictions.json"), &pred)?;
        fs::write(dir.join("report.json"), report.to_json() + "\n")?;
    }
    println!("{report}");
    Ok(())
}

fn write_training_outputs(
    out: &Path,
    ckpt: &Checkpoint,
    history: &TrainHistory,
    pred: Option<&AnnotationSet>,
    report: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let name = match ckpt.kind {
        CheckpointKind::Probe => "probe.ckpt",
        CheckpointKind::Adapted => "adapted.ckpt",
    };
    write_checkpoint(out.join(name), ckpt)?;
    fs::write(out.join("history.jsonl"), history.to_jsonl())?;
    if let Some(p) = pred {
        write_annotations(out.join("predictions.json"), p)?;
    }
    write_json(&out.join("report.json"), &report)
}

fn val_report(val: &[DatasetVideo], pred: &AnnotationSet) -> Result<Option<MetricsReport>> {
    if val.is_empty() {
        return Ok(None);
    }
    evaluate(val, pred, EvalMode::Full, Pooling::Frame).map(Some)
}

fn print_summary(report: Option<&MetricsReport>, history: &TrainHistory, learnable: usize) {
    println!(
        "loss {:.4} -> {:.4}, learnable parameters: {learnable}",
        history.initial_loss, history.final_loss
    );
    match report {
        Some(r) => println!("{r}"),
        None => println!("(no validation split)"),
    }
}

fn train_probe_cmd(cfg: &RunConfig, run: &RunInfo, data: &DataArgs, out: &Path) -> Result<()> {
    let optim = cfg.optim(OptimConfig::probing(), run.seed)?;
    let probe_cfg = cfg.probe()?;
    let (kind, videos) = load(data)?;
    require_kind(kind, DatasetKind::Features, "train-probe")?;
    let (train, val) = split_videos(videos);
    let (params, history) = train_probe(&train, &val, &optim, &probe_cfg)?;
    let pred = if val.is_empty() {
        None
    } else {
        Some(predict_probe(&val, &params, &probe_cfg)?)
    };
    let report = match &pred {
        Some(p) => val_report(&val, p)?,
        None => None,
    };
    let run_json = json!({
        "optim": optim,
        "probe": probe_cfg,
        "resolution": data.resolution,
        "deterministic": run.deterministic,
    });
    let ckpt = Checkpoint::probe(&params, run_json.clone());
    write_training_outputs(
        out,
        &ckpt,
        &history,
        pred.as_ref(),
        json!({
            "learnable_params": params.param_count(),
            "initial_loss": history.initial_loss,
            "final_loss": history.final_loss,
            "val": report,
            "config": run_json,
        }),
    )?;
    print_summary(report.as_ref(), &history, params.param_count());
    Ok(())
}

fn train_adapt_cmd(
    cfg: &RunConfig,
    run: &RunInfo,
    data: &DataArgs,
    rank: Option<String>,
    out: &Path,
) -> Result<()> {
    let optim = cfg.optim(OptimConfig::adaptation(), run.seed)?;
    let probe_cfg = cfg.probe()?;
    let mut adapt = cfg.adapt.clone().unwrap_or_default();
    if let Some(r) = rank {
        adapt.rank = r.parse().expect("validated by clap");
    }
    adapt.vit.validate()?;
    let (kind, videos) = load(data)?;
    require_kind(kind, DatasetKind::Images, "train-adapt")?;
    let (train, val) = split_videos(videos);
    let result = train_adaptation(
        &train,
        &val,
        &optim,
        &probe_cfg,
        adapt.init(optim.seed)?,
        probe_init(optim.seed),
    )?;
    let pred = if val.is_empty() {
        None
    } else {
        Some(predict_adapted(&val, &result.vit, &result.probe, &probe_cfg)?)
    };
    let report = match &pred {
        Some(p) => val_report(&val, p)?,
        None => None,
    };
    let run_json = json!({
        "optim": optim,
        "probe": probe_cfg,
        "adapt": adapt,
        "deterministic": run.deterministic,
    });
    let ckpt = Checkpoint::adapted(&result.vit, &result.probe, run_json.clone());
    let learnable = result.learnable_params();
    write_training_outputs(
        out,
        &ckpt,
        &result.history,
        pred.as_ref(),
        json!({
            "rank": adapt.rank,
            "adapter_params": result.vit.adapter_param_count(),
            "probe_params": result.probe.param_count(),
            "learnable_params": learnable,
            "initial_loss": result.history.initial_loss,
            "final_loss": result.history.final_loss,
            "val": report,
            "config": run_json,
        }),
    )?;
    println!(
        "rank {}: adapter parameters: {}",
        adapt.rank,
        result.vit.adapter_param_count()
    );
    print_summary(report.as_ref(), &result.history, learnable);
    Ok(())
}

fn predict_adapted(
    videos: &[DatasetVideo],
    vit: &LoRAViTParams<f64>,
    probe: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<AnnotationSet> {
    let encoded = videos
        .iter()
        .map(|v| Ok((v.id.clone(), encode_video(&v.video, vit)?, &v.annotation)))
        .collect::<Result<Vec<_>>>()?;
    let view: Vec<_> = encoded.iter().map(|(id, f, a)| (id.as_str(), f, *a)).collect();
    predict_dataset(&view, |f, q| probe_track(f, q, probe, config))
}

fn eval_cmd(
    predictions: &Path,
    annotations: &Path,
    zero_shot: bool,
    pooling: PoolingArg,
    out: Option<&Path>,
) -> Result<()> {
    let all = read_annotations(annotations)?;
    let pred = read_predictions(predictions)?;
    // predictions may cover a subset (e.g. the validation split)
    let gt = AnnotationSet::new(
        all.videos
            .iter()
            .filter(|v| pred.video(&v.id).is_some())
            .cloned()
            .collect(),
    );
    if let Some(extra) = pred.videos.iter().find(|v| all.video(&v.id).is_none()) {
        return Err(Error::InvalidInput(format!("predictions for unknown video {}", extra.id)));
    }
    if gt.videos.is_empty() {
        return Err(Error::InvalidInput("predictions share no video with the annotations".into()));
    }
    let mode = if zero_shot { EvalMode::ZeroShot } else { EvalMode::Full };
    let pooling = match pooling {
        PoolingArg::Frame => Pooling::Frame,
        PoolingArg::Video => Pooling::Video,
    };
    let report = evaluate_queried_first(&gt, &pred, mode, pooling)?;
    if let Some(path) = out {
        fs::write(path, report.to_json() + "\n")?;
    }
    println!("scored {} of {} annotated videos", gt.videos.len(), all.videos.len());
    println!("{report}");
    Ok(())
}

enum Tracker {
    ZeroShot,
    Probe(ProbeParams<f64>),
    Adapted(LoRAViTParams<f64>, ProbeParams<f64>),
}

fn viz_cmd(
    cfg: &RunConfig,
    data: &DataArgs,
    video_id: &str,
    track: usize,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let probe_cfg = cfg.probe()?;
    let tracker = match checkpoint {
        None => Tracker::ZeroShot,
        Some(path) => {
            let ck = read_checkpoint(path)?;
            match ck.kind {
                CheckpointKind::Probe => Tracker::Probe(ck.into_probe()?),
                CheckpointKind::Adapted => {
                    let (vit, probe) = ck.into_adapted()?;
                    Tracker::Adapted(vit, probe)
                }
            }
        }
    };
    let (kind, videos) = load(data)?;
    let v = videos
        .iter()
        .find(|v| v.id == video_id)
        .ok_or_else(|| Error::InvalidInput(format!("no video {video_id} in the dataset")))?;
    let t = v.annotation.tracks.get(track).ok_or_else(|| {
        Error::InvalidInput(format!("video {video_id} has {} tracks", v.annotation.tracks.len()))
    })?;
    let features: FeatureVideo<f64> = match (&tracker, kind) {
        (Tracker::Adapted(vit, _), DatasetKind::Images) => encode_video(&v.video, vit)?,
        (Tracker::Adapted(..), DatasetKind::Features) => {
            return Err(Error::InvalidInput("adapted checkpoints need an image dataset".into()))
        }
        (_, DatasetKind::Images) => {
            return Err(Error::InvalidInput(
                "image datasets need an adapted checkpoint to produce features".into(),
            ))
        }
        (_, DatasetKind::Features) => v.video.cast(),
    };
    let query: Query = first_visible_query(&features, t)?;
    let geom = features.geometry();
    let volume = correlation_volume(&features, &query)?;
    let scale = (256 / geom.grid_w.max(1)).max(1);
    fs::create_dir_all(out)?;
    for (k, map) in volume.iter().enumerate() {
        let pred: Point<f64> = match &tracker {
            Tracker::ZeroShot => argmax2d(map)?,
            Tracker::Probe(p) | Tracker::Adapted(_, p) => probe_forward_with(map, p, &probe_cfg)?.point,
        };
        let mut markers = vec![Marker {
            at: pred,
            color: [0, 0, 0],
            shape: Shape::Square,
        }];
        if t.visible[k] {
            markers.push(Marker {
                at: geom.to_grid(t.point(k)),
                color: [0, 200, 0],
                shape: Shape::Cross,
            });
        }
        render_heatmap(map, scale, &markers).write_ppm(out.join(format!("frame_{k:03}.ppm")))?;
    }
    println!(
        "wrote {} heatmaps for {video_id} track {track} (query frame {}) to {}",
        volume.len(),
        query.t_q,
        out.display()
    );
    Ok(())
}
