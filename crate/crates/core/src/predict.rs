//! Dataset-level tracking: every ground-truth track is queried at its first
//! visible frame and the predictions are returned in annotation form.

use crate::error::{Error, Result};
use crate::io::annotations::{AnnotationSet, TrackAnnotation, VideoAnnotation};
use crate::io::manifest::DatasetVideo;
use crate::metrics::{evaluate_queried_first, EvalMode, MetricsReport, Pooling};
use crate::probe::{probe_forward_with, ProbeConfig, ProbeParams};
use crate::scalar::Real;
use crate::tracker::{correlation_volume, zero_shot_track, FeatureVideo, Query, Trajectory};

/// Query of track `k`: first visible frame, ground-truth location in grid units.
pub fn first_visible_query(video: &FeatureVideo<impl Real>, track: &TrackAnnotation) -> Result<Query> {
    let t_q = track
        .first_visible()
        .ok_or_else(|| Error::InvalidInput("track has no visible frame".into()))?;
    Ok(Query::new(t_q, video.geometry().to_grid(track.point(t_q))))
}

/// Probe tracking: correlation volume through the probe heads.
pub fn probe_track<S: Real>(
    video: &FeatureVideo<S>,
    query: &Query,
    params: &ProbeParams<S>,
    config: &ProbeConfig,
) -> Result<Trajectory> {
    let volume = correlation_volume(video, query)?;
    let mut points = Vec::with_capacity(volume.len());
    let mut visible = Vec::with_capacity(volume.len());
    let mut probs = Vec::with_capacity(volume.len());
    for c in &volume {
        let out = probe_forward_with(c, params, config)?;
        points.push(out.point.cast());
        visible.push(out.visible());
        probs.push(out.occlusion_prob());
    }
    Ok(Trajectory {
        points,
        visible,
        occlusion_prob: Some(probs),
    })
}

/// Convert a grid-unit trajectory into a pixel-space prediction track.
pub fn to_track_annotation(video: &FeatureVideo<impl Real>, traj: &Trajectory) -> TrackAnnotation {
    let geom = video.geometry();
    TrackAnnotation {
        points: traj
            .points
            .iter()
            .map(|&p| {
                let px = geom.to_pixels(p);
                [px.x, px.y]
            })
            .collect(),
        visible: traj.visible.clone(),
        occlusion_prob: traj.occlusion_prob.clone(),
    }
}

/// Run `track` on every annotated track of every video.
pub fn predict_dataset<S: Real>(
    videos: &[(&str, &FeatureVideo<S>, &VideoAnnotation)],
    mut track: impl FnMut(&FeatureVideo<S>, &Query) -> Result<Trajectory>,
) -> Result<AnnotationSet> {
    let mut out = Vec::with_capacity(videos.len());
    for &(id, video, ann) in videos {
        let tracks = ann
            .tracks
            .iter()
            .map(|t| {
                let q = first_visible_query(video, t)?;
                Ok(to_track_annotation(video, &track(video, &q)?))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(VideoAnnotation {
            id: id.to_string(),
            resolution: ann.resolution,
            tracks,
        });
    }
    Ok(AnnotationSet::new(out))
}

fn view<'a, S>(videos: &'a [(String, FeatureVideo<S>, &'a VideoAnnotation)]) -> Vec<(&'a str, &'a FeatureVideo<S>, &'a VideoAnnotation)> {
    videos.iter().map(|(id, v, a)| (id.as_str(), v, *a)).collect()
}

fn as_f64(videos: &[DatasetVideo]) -> Vec<(String, FeatureVideo<f64>, &VideoAnnotation)> {
    videos
        .iter()
        .map(|v| (v.id.clone(), v.video.cast::<f64>(), &v.annotation))
        .collect()
}

pub fn ground_truth(videos: &[DatasetVideo]) -> AnnotationSet {
    AnnotationSet::new(videos.iter().map(|v| v.annotation.clone()).collect())
}

/// Zero-shot predictions for a loaded dataset (computed in f64).
pub fn predict_zero_shot(videos: &[DatasetVideo]) -> Result<AnnotationSet> {
    let vids = as_f64(videos);
    predict_dataset(&view(&vids), zero_shot_track)
}

/// Probe predictions for a loaded dataset.
pub fn predict_probe(
    videos: &[DatasetVideo],
    params: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<AnnotationSet> {
    let vids = as_f64(videos);
    predict_dataset(&view(&vids), |v, q| probe_track(v, q, params, config))
}

pub fn evaluate(
    videos: &[DatasetVideo],
    predictions: &AnnotationSet,
    mode: EvalMode,
    pooling: Pooling,
) -> Result<MetricsReport> {
    evaluate_queried_first(&ground_truth(videos), predictions, mode, pooling)
}
