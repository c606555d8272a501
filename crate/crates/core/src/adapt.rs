//! Backbone adaptation: toy ViT features (with LoRA adapters) feed the same
//! correlation and probe pipeline used for probing, and the loss is
//! backpropagated through probe, cosine correlation and query sampling into
//! the adapters. Base weights never change.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::annotations::VideoAnnotation;
use crate::io::manifest::DatasetVideo;
use crate::optim::{adamw_step, OptimConfig, OptimState};
use crate::predict::probe_track;
use crate::probe::{item_loss_and_grad, loss_scales, ProbeConfig, ProbeParams, ProbeSample};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::{bilinear_sample, resize_bilinear, Grid, Point};
use crate::tracker::{
    correlation_map, correlation_map_backward, scatter_query_gradient, FeatureVideo, GridGeometry, Query,
    Trajectory,
};
use crate::train::{
    dataset_probe_loss, shuffle_rng, step_lr, val_metrics, validate_inputs, video_examples, EpochRecord,
    TrainHistory, ValMetrics,
};
use crate::vit::{lora_init, vit_backward, vit_forward, vit_forward_base, vit_init, LoRAViTParams, ViTCache, ViTConfig, ViTParams};

/// Backbone and adapter shape for an adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub vit: ViTConfig,
    pub rank: usize,
    /// LoRA scaling numerator; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
    /// Seed of the frozen base weights (the stand-in for a pretrained model).
    pub base_seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            rank: 16,
            alpha: None,
            base_seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn base(&self) -> Result<ViTParams<f64>> {
        vit_init(&self.vit, self.base_seed)
    }

    /// Base weights with fresh adapters (A from `seed`, B = 0).
    pub fn init(&self, seed: u64) -> Result<LoRAViTParams<f64>> {
        lora_init(self.base()?, self.rank, self.alpha(), seed)
    }
}

/// Resize to the backbone resolution and center pixel values: `[0, 1]` maps
/// to `[-2, 2]`. Raw positive pixels give every patch embedding a large shared
/// component and nearly constant correlation maps.
fn backbone_input(image: &Grid<f64>, config: &ViTConfig) -> Result<Grid<f64>> {
    let r = config.input_resolution;
    let sized = if image.height() == r && image.width() == r {
        image.clone()
    } else {
        resize_bilinear(image, r, r)?
    };
    Ok(sized.map(|v| (v - 0.5) / 0.25))
}

fn encode_with<S: Real>(
    images: &FeatureVideo<S>,
    config: &ViTConfig,
    mut f: impl FnMut(&Grid<f64>) -> Result<Grid<f64>>,
) -> Result<FeatureVideo<f64>> {
    let (c, _, _) = images.frame_shape();
    if c != config.in_channels {
        return invalid(format!(
            "backbone expects {}-channel images, video has {c} channels",
            config.in_channels
        ));
    }
    let frames = images
        .frames()
        .iter()
        .map(|img| f(&backbone_input(&img.cast(), config)?))
        .collect::<Result<Vec<_>>>()?;
    let source = images.source_resolution;
    let stride = ((source.1 as f64 / config.grid_side() as f64).round() as u32).max(1);
    FeatureVideo::new(frames, stride, source)
}

/// Per-frame backbone features of an image video (adapter path).
pub fn encode_video<S: Real>(
    images: &FeatureVideo<S>,
    vit: &LoRAViTParams<f64>,
) -> Result<FeatureVideo<f64>> {
    encode_with(images, &vit.base.config, |x| vit_forward(x, vit, false).map(|(g, _)| g))
}

/// Per-frame features through plain weights (the frozen base or merged weights).
pub fn encode_video_base<S: Real>(
    images: &FeatureVideo<S>,
    vit: &ViTParams<f64>,
) -> Result<FeatureVideo<f64>> {
    encode_with(images, &vit.config, |x| vit_forward_base(x, vit))
}

/// Replace every image video by its backbone features, keeping ids, splits
/// and annotations.
pub fn encode_dataset(videos: &[DatasetVideo], vit: &LoRAViTParams<f64>) -> Result<Vec<DatasetVideo>> {
    videos
        .iter()
        .map(|v| {
            Ok(DatasetVideo {
                video: encode_video(&v.video, vit)?.cast(),
                ..v.clone()
            })
        })
        .collect()
}

pub fn encode_dataset_base(videos: &[DatasetVideo], vit: &ViTParams<f64>) -> Result<Vec<DatasetVideo>> {
    videos
        .iter()
        .map(|v| {
            Ok(DatasetVideo {
                video: encode_video_base(&v.video, vit)?.cast(),
                ..v.clone()
            })
        })
        .collect()
}

/// Track one query through backbone, correlation and probe. Also returns the
/// encoded features so callers can inspect correlation maps.
pub fn adapt_forward_track(
    images: &FeatureVideo<f64>,
    vit: &LoRAViTParams<f64>,
    probe: &ProbeParams<f64>,
    config: &ProbeConfig,
    query: &Query,
) -> Result<(Trajectory, FeatureVideo<f64>)> {
    let features = encode_video(images, vit)?;
    let traj = probe_track(&features, query, probe, config)?;
    Ok((traj, features))
}

/// One query with its supervision, in feature-grid units.
#[derive(Clone, Debug)]
pub struct AdaptTrack {
    pub query: Query,
    pub gt: Vec<Point<f64>>,
    pub occluded: Vec<bool>,
}

/// Backbone-ready frames of one video and its tracks.
#[derive(Clone, Debug)]
pub struct AdaptVideo {
    pub frames: Vec<Grid<f64>>,
    pub tracks: Vec<AdaptTrack>,
}

/// Resize frames to the backbone input and express tracks on its token grid.
pub fn adapt_video(
    images: &FeatureVideo<f32>,
    annotation: &VideoAnnotation,
    config: &ViTConfig,
) -> Result<AdaptVideo> {
    let frames = images
        .frames()
        .iter()
        .map(|f| backbone_input(&f.cast(), config))
        .collect::<Result<Vec<_>>>()?;
    let g = config.grid_side();
    let geom = GridGeometry {
        grid_h: g,
        grid_w: g,
        source_h: images.source_resolution.0 as usize,
        source_w: images.source_resolution.1 as usize,
    };
    let tracks = annotation
        .tracks
        .iter()
        .map(|t| {
            let t_q = t
                .first_visible()
                .ok_or_else(|| Error::InvalidInput("track has no visible frame".into()))?;
            Ok(AdaptTrack {
                query: Query::new(t_q, geom.to_grid(t.point(t_q))),
                gt: (0..t.points.len()).map(|k| geom.to_grid(t.point(k))).collect(),
                occluded: t.visible.iter().map(|&v| !v).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptVideo { frames, tracks })
}

/// Gradients of one batch: probe heads and adapters (flat layout).
pub struct AdaptGrad {
    pub loss: f64,
    pub probe: ProbeParams<f64>,
    pub adapters: Vec<f64>,
}

/// Loss and gradient of a batch of `(video, track)` items. Items of the same
/// video share one recorded forward pass per frame.
pub fn batch_adapt_grad(
    videos: &[AdaptVideo],
    items: &[(usize, usize)],
    vit: &LoRAViTParams<f64>,
    probe: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<AdaptGrad> {
    let (ps, os) = loss_scales(
        items
            .iter()
            .flat_map(|&(v, k)| videos[v].tracks[k].occluded.iter().copied()),
        config,
    );
    let mut out = AdaptGrad {
        loss: 0.0,
        probe: ProbeParams::zeros(),
        adapters: vec![0.0; vit.adapter_param_count()],
    };
    let mut start = 0;
    while start < items.len() {
        let v = items[start].0;
        let end = start + items[start..].iter().take_while(|it| it.0 == v).count();
        let tracks: Vec<usize> = items[start..end].iter().map(|it| it.1).collect();
        video_grad(&videos[v], &tracks, vit, probe, config, (ps, os), &mut out)?;
        start = end;
    }
    Ok(out)
}

fn video_grad(
    video: &AdaptVideo,
    tracks: &[usize],
    vit: &LoRAViTParams<f64>,
    probe: &ProbeParams<f64>,
    config: &ProbeConfig,
    (ps, os): (f64, f64),
    out: &mut AdaptGrad,
) -> Result<()> {
    let mut feats = Vec::with_capacity(video.frames.len());
    let mut caches: Vec<ViTCache<f64>> = Vec::with_capacity(video.frames.len());
    for img in &video.frames {
        let (f, c) = vit_forward(img, vit, true)?;
        feats.push(f);
        caches.push(c);
    }
    let (d, h, w) = feats[0].shape();
    let mut d_feats: Vec<Grid<f64>> = (0..feats.len()).map(|_| Grid::zeros(d, h, w)).collect();
    for &k in tracks {
        let track = &video.tracks[k];
        let p_q = track.query.point;
        let q = bilinear_sample(&feats[track.query.t_q], p_q)?;
        let mut d_q = vec![0.0; d];
        for (t, frame) in feats.iter().enumerate() {
            let map = correlation_map(frame, &q)?;
            let sample = ProbeSample {
                map: &map,
                gt: track.gt[t],
                occluded: track.occluded[t],
            };
            let item = item_loss_and_grad(&sample, probe, config, ps, os, &mut out.probe, true)?;
            out.loss += item.loss;
            let d_map = item.input.expect("input gradient requested");
            let (d_f, d_qt) = correlation_map_backward(frame, &q, &d_map)?;
            for (a, b) in d_feats[t].data_mut().iter_mut().zip(d_f.data()) {
                *a += b;
            }
            for (a, b) in d_q.iter_mut().zip(&d_qt) {
                *a += b;
            }
        }
        scatter_query_gradient(&mut d_feats[track.query.t_q], p_q, &d_q)?;
    }
    for (g, cache) in d_feats.iter().zip(&caches) {
        for (a, b) in out.adapters.iter_mut().zip(vit_backward(g, vit, cache)?) {
            *a += b;
        }
    }
    Ok(())
}

/// Batches of `(video, track)` items: videos in shuffled order, their tracks
/// concatenated and cut every `batch_size` items. Keeping a video's tracks
/// together lets them share the backbone pass.
pub(crate) fn video_grouped_batches(
    videos: &[AdaptVideo],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..videos.len()).collect();
    rng.shuffle(&mut order);
    let items: Vec<(usize, usize)> = order
        .iter()
        .flat_map(|&v| (0..videos[v].tracks.len()).map(move |k| (v, k)))
        .collect();
    items.chunks(batch_size).map(<[_]>::to_vec).collect()
}

fn dataset_adapt_loss(
    train: &[DatasetVideo],
    vit: &LoRAViTParams<f64>,
    probe: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<f64> {
    let mut examples = Vec::new();
    for v in train {
        examples.extend(video_examples(&encode_video(&v.video, vit)?, &v.annotation)?);
    }
    dataset_probe_loss(&examples, probe, config)
}

fn adapt_val(
    val: &[DatasetVideo],
    vit: &LoRAViTParams<f64>,
    probe: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<Option<ValMetrics>> {
    if val.is_empty() {
        return Ok(None);
    }
    val_metrics(&encode_dataset(val, vit)?, probe, config)
}

/// Result of an adaptation run.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub vit: LoRAViTParams<f64>,
    pub probe: ProbeParams<f64>,
    pub history: TrainHistory,
}

impl Adapted {
    /// Adapter plus probe parameters.
    pub fn learnable_params(&self) -> usize {
        self.vit.adapter_param_count() + self.probe.param_count()
    }
}

/// Co-train adapters and probe heads with one AdamW over `[adapters, probe]`.
/// Only those two parameter sets change; the base weights are never written.
pub fn train_adaptation(
    train: &[DatasetVideo],
    val: &[DatasetVideo],
    optim: &OptimConfig,
    probe_config: &ProbeConfig,
    vit: LoRAViTParams<f64>,
    probe: ProbeParams<f64>,
) -> Result<Adapted> {
    validate_inputs(train, optim, probe_config)?;
    let videos = train
        .iter()
        .map(|v| adapt_video(&v.video, &v.annotation, &vit.base.config))
        .collect::<Result<Vec<_>>>()?;
    let samples: usize = videos.iter().map(|v| v.tracks.len()).sum();
    let schedule = optim.schedule(samples)?;
    let (mut vit, mut probe) = (vit, probe);
    let n_adapt = vit.adapter_param_count();
    let mut flat = vit.adapters_to_flat();
    flat.extend(probe.to_flat());
    let mut state = OptimState::new(flat.len());
    let mut rng = shuffle_rng(optim.seed);

    let initial_loss = dataset_adapt_loss(train, &vit, &probe, probe_config)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_loss,
        lr: schedule.lr_at(0),
        steps: 0,
        val: adapt_val(val, &vit, &probe, probe_config)?,
    }];
    for epoch in 1..=optim.epochs {
        let batches = video_grouped_batches(&videos, optim.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for items in &batches {
            let g = batch_adapt_grad(&videos, items, &vit, &probe, probe_config)?;
            let mut grad = g.adapters;
            grad.extend(g.probe.to_flat());
            lr = step_lr(&schedule, &state);
            adamw_step(&mut flat, &grad, &mut state, lr, optim)?;
            vit.set_adapters_flat(&flat[..n_adapt])?;
            probe.set_flat(&flat[n_adapt..])?;
            loss_sum += g.loss;
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            lr,
            steps: state.step,
            val: adapt_val(val, &vit, &probe, probe_config)?,
        });
    }
    let final_loss = dataset_adapt_loss(train, &vit, &probe, probe_config)?;
    Ok(Adapted {
        vit,
        probe,
        history: TrainHistory {
            records,
            initial_loss,
            final_loss,
        },
    })
}
