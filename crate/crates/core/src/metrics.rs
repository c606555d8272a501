//! TAP-Vid style tracking metrics in the queried-first protocol.
//!
//! All distances are measured at a 256x256 evaluation resolution. A track is
//! evaluated on the frames strictly after its query frame; the query frame is
//! given, not predicted.
//!
//! For a threshold `d` (pixels) and an evaluated frame:
//! - position hit: ground truth visible and `|pred - gt| < d`
//! - `δ(d)`: position hits / ground-truth-visible frames
//! - Jaccard: `TP / (TP + FN + FP)` with `TP` = hit and predicted visible,
//!   `FN` = ground truth visible but not a `TP`, `FP` = predicted visible but not
//!   a hit (ground truth occluded, or too far away)
//! - occlusion accuracy: fraction of frames with `pred_visible == gt_visible`
//!
//! `δ_avg` and `AJ` average over the thresholds 1, 2, 4, 8, 16.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::annotations::AnnotationSet;
use crate::tensor::Point;

pub const EVAL_RESOLUTION: f64 = 256.0;
pub const DEFAULT_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// One track, coordinates in evaluation pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTrack {
    pub gt_points: Vec<Point<f64>>,
    pub gt_visible: Vec<bool>,
    pub pred_points: Vec<Point<f64>>,
    pub pred_visible: Vec<bool>,
    pub query_index: usize,
}

impl EvalTrack {
    pub fn len(&self) -> usize {
        self.gt_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_points.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let t = self.gt_points.len();
        if self.gt_visible.len() != t || self.pred_points.len() != t || self.pred_visible.len() != t {
            return Err(Error::InvalidInput(format!(
                "track lengths differ: gt {t}/{}, pred {}/{}",
                self.gt_visible.len(),
                self.pred_points.len(),
                self.pred_visible.len()
            )));
        }
        if self.query_index >= t {
            return Err(Error::InvalidInput(format!(
                "query index {} out of range for {t} frames",
                self.query_index
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Every evaluated frame of the dataset weighs the same.
    #[default]
    Frame,
    /// Metrics per video, then the unweighted mean over videos.
    Video,
}

/// Raw counts over a set of tracks; all metrics are ratios of these.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub frames: usize,
    pub gt_visible: usize,
    pub occlusion_correct: usize,
    pub hits: Vec<usize>,
    pub true_positives: Vec<usize>,
    pub false_positives: Vec<usize>,
}

impl Counts {
    fn new(n: usize) -> Self {
        Self {
            hits: vec![0; n],
            true_positives: vec![0; n],
            false_positives: vec![0; n],
            ..Default::default()
        }
    }

    fn add(&mut self, other: &Counts) {
        self.frames += other.frames;
        self.gt_visible += other.gt_visible;
        self.occlusion_correct += other.occlusion_correct;
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        for (a, b) in self.true_positives.iter_mut().zip(&other.true_positives) {
            *a += b;
        }
        for (a, b) in self.false_positives.iter_mut().zip(&other.false_positives) {
            *a += b;
        }
    }

    pub fn of_tracks(tracks: &[EvalTrack], thresholds: &[f64]) -> Result<Self> {
        let mut total = Counts::new(thresholds.len());
        for tr in tracks {
            total.add(&track_counts(tr, thresholds)?);
        }
        Ok(total)
    }

    pub fn deltas(&self) -> Result<Vec<f64>> {
        if self.gt_visible == 0 {
            return Err(Error::UndefinedMetric(
                "no ground-truth-visible frames after the query".into(),
            ));
        }
        Ok(self
            .hits
            .iter()
            .map(|&h| h as f64 / self.gt_visible as f64)
            .collect())
    }

    pub fn occlusion_accuracy(&self) -> Result<f64> {
        if self.frames == 0 {
            return Err(Error::UndefinedMetric("no frames after the query".into()));
        }
        Ok(self.occlusion_correct as f64 / self.frames as f64)
    }

    /// Empty denominators (nothing visible, nothing predicted) score 1.
    pub fn jaccards(&self) -> Vec<f64> {
        self.true_positives
            .iter()
            .zip(&self.false_positives)
            .map(|(&tp, &fp)| {
                let denom = self.gt_visible + fp;
                if denom == 0 {
                    1.0
                } else {
                    tp as f64 / denom as f64
                }
            })
            .collect()
    }
}

fn track_counts(tr: &EvalTrack, thresholds: &[f64]) -> Result<Counts> {
    tr.validate()?;
    let mut c = Counts::new(thresholds.len());
    for t in tr.query_index + 1..tr.len() {
        let gt_vis = tr.gt_visible[t];
        let pred_vis = tr.pred_visible[t];
        c.frames += 1;
        if gt_vis == pred_vis {
            c.occlusion_correct += 1;
        }
        if gt_vis {
            c.gt_visible += 1;
        }
        let dist = tr.pred_points[t].distance(&tr.gt_points[t]);
        for (k, &thr) in thresholds.iter().enumerate() {
            let hit = gt_vis && dist < thr;
            if hit {
                c.hits[k] += 1;
            }
            if hit && pred_vis {
                c.true_positives[k] += 1;
            }
            if pred_vis && !hit {
                c.false_positives[k] += 1;
            }
        }
    }
    Ok(c)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `δ_avg` and the per-threshold fractions at the default thresholds.
pub fn delta_avg(tracks: &[EvalTrack]) -> Result<(f64, Vec<f64>)> {
    delta_avg_at(tracks, &DEFAULT_THRESHOLDS)
}

pub fn delta_avg_at(tracks: &[EvalTrack], thresholds: &[f64]) -> Result<(f64, Vec<f64>)> {
    let deltas = Counts::of_tracks(tracks, thresholds)?.deltas()?;
    Ok((mean(&deltas), deltas))
}

pub fn occlusion_accuracy(tracks: &[EvalTrack]) -> Result<f64> {
    Counts::of_tracks(tracks, &DEFAULT_THRESHOLDS)?.occlusion_accuracy()
}

/// `AJ` and the per-threshold Jaccard values at the default thresholds.
pub fn average_jaccard(tracks: &[EvalTrack]) -> Result<(f64, Vec<f64>)> {
    average_jaccard_at(tracks, &DEFAULT_THRESHOLDS)
}

pub fn average_jaccard_at(tracks: &[EvalTrack], thresholds: &[f64]) -> Result<(f64, Vec<f64>)> {
    let j = Counts::of_tracks(tracks, thresholds)?.jaccards();
    Ok((mean(&j), j))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Position accuracy only (`δ_avg`); no occlusion predictions exist.
    ZeroShot,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aj: Option<f64>,
    pub delta_avg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oa: Option<f64>,
    pub thresholds: Vec<f64>,
    pub delta_per_threshold: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jaccard_per_threshold: Option<Vec<f64>>,
    pub pooling: Pooling,
    pub num_videos: usize,
    pub num_tracks: usize,
    pub frames_evaluated: usize,
}

impl MetricsReport {
    /// Build a report from per-video track lists.
    pub fn from_videos(videos: &[Vec<EvalTrack>], mode: EvalMode, pooling: Pooling) -> Result<Self> {
        let thresholds = DEFAULT_THRESHOLDS.to_vec();
        let per_video = videos
            .iter()
            .map(|v| Counts::of_tracks(v, &thresholds))
            .collect::<Result<Vec<_>>>()?;
        let mut total = Counts::new(thresholds.len());
        for c in &per_video {
            total.add(c);
        }
        let full = mode == EvalMode::Full;
        let (deltas, jaccards, oa) = match pooling {
            Pooling::Frame => (
                total.deltas()?,
                total.jaccards(),
                if full { Some(total.occlusion_accuracy()?) } else { None },
            ),
            Pooling::Video => {
                let defined: Vec<&Counts> = per_video.iter().filter(|c| c.gt_visible > 0).collect();
                if defined.is_empty() {
                    return Err(Error::UndefinedMetric("no video has evaluable visible frames".into()));
                }
                let k = thresholds.len();
                let avg = |f: &dyn Fn(&Counts) -> Vec<f64>| -> Vec<f64> {
                    (0..k)
                        .map(|i| {
                            let mut vals: Vec<f64> = defined.iter().map(|c| f(c)[i]).collect();
                            // order-independent summation
                            vals.sort_by(f64::total_cmp);
                            mean(&vals)
                        })
                        .collect()
                };
                let deltas = avg(&|c| c.deltas().expect("visible frames present"));
                let jaccards = avg(&|c| c.jaccards());
                let oa = if full {
                    let mut vals: Vec<f64> = defined
                        .iter()
                        .map(|c| c.occlusion_accuracy().expect("frames present"))
                        .collect();
                    vals.sort_by(f64::total_cmp);
                    Some(mean(&vals))
                } else {
                    None
                };
                (deltas, jaccards, oa)
            }
        };
        Ok(Self {
            aj: full.then(|| mean(&jaccards)),
            delta_avg: mean(&deltas),
            oa,
            thresholds,
            delta_per_threshold: deltas,
            jaccard_per_threshold: full.then_some(jaccards),
            pooling,
            num_videos: videos.len(),
            num_tracks: videos.iter().map(Vec::len).sum(),
            frames_evaluated: total.frames,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    /// Columns in the order AJ, δ^vis_avg, OA; absent metrics print as `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        writeln!(f, "| {:<7} | {:<9} | {:<7} |", "AJ", "δ^vis_avg", "OA")?;
        writeln!(f, "|---------|-----------|---------|")?;
        write!(
            f,
            "| {:<7} | {:<9} | {:<7} |",
            cell(self.aj),
            cell(Some(self.delta_avg)),
            cell(self.oa)
        )
    }
}

/// Pair predictions with ground truth, video by video, in evaluation pixels.
/// Each track's query is its first visible ground-truth frame.
pub fn build_eval_tracks(
    dataset: &AnnotationSet,
    predictions: &AnnotationSet,
) -> Result<Vec<Vec<EvalTrack>>> {
    dataset
        .videos
        .iter()
        .map(|gt| {
            let pred = predictions.video(&gt.id).ok_or_else(|| {
                Error::InvalidInput(format!("no predictions for video {}", gt.id))
            })?;
            if pred.tracks.len() != gt.tracks.len() || pred.num_frames() != gt.num_frames() {
                return Err(Error::InvalidInput(format!(
                    "video {}: predictions have {} tracks x {} frames, annotations {} x {}",
                    gt.id,
                    pred.tracks.len(),
                    pred.num_frames(),
                    gt.tracks.len(),
                    gt.num_frames()
                )));
            }
            let sx = EVAL_RESOLUTION / gt.resolution[1] as f64;
            let sy = EVAL_RESOLUTION / gt.resolution[0] as f64;
            let scale = |p: &[f64; 2]| Point::new(p[0] * sx, p[1] * sy);
            gt.tracks
                .iter()
                .zip(&pred.tracks)
                .map(|(g, p)| {
                    let query_index = g.first_visible().ok_or_else(|| {
                        Error::InvalidInput(format!("video {}: track without visible frame", gt.id))
                    })?;
                    Ok(EvalTrack {
                        gt_points: g.points.iter().map(scale).collect(),
                        gt_visible: g.visible.clone(),
                        pred_points: p.points.iter().map(scale).collect(),
                        pred_visible: p.visible.clone(),
                        query_index,
                    })
                })
                .collect()
        })
        .collect()
}

/// Queried-first evaluation of a prediction set against ground truth.
pub fn evaluate_queried_first(
    dataset: &AnnotationSet,
    predictions: &AnnotationSet,
    mode: EvalMode,
    pooling: Pooling,
) -> Result<MetricsReport> {
    let videos = build_eval_tracks(dataset, predictions)?;
    MetricsReport::from_videos(&videos, mode, pooling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(gt: &[(f64, f64, bool)], pred: &[(f64, f64, bool)]) -> EvalTrack {
        EvalTrack {
            gt_points: gt.iter().map(|&(x, y, _)| Point::new(x, y)).collect(),
            gt_visible: gt.iter().map(|&(_, _, v)| v).collect(),
            pred_points: pred.iter().map(|&(x, y, _)| Point::new(x, y)).collect(),
            pred_visible: pred.iter().map(|&(_, _, v)| v).collect(),
            query_index: 0,
        }
    }

    #[test]
    fn delta_examples() {
        let gt = [(10.0, 10.0, true), (20.0, 5.0, true), (30.0, 7.0, true), (1.0, 1.0, false)];
        let perfect = track(&gt, &gt);
        assert_eq!(delta_avg(&[perfect.clone()]).unwrap().0, 1.0);
        let off: Vec<_> = gt.iter().map(|&(x, y, v)| (x + 3.0, y, v)).collect();
        let (d, per) = delta_avg(&[track(&gt, &off)]).unwrap();
        assert_eq!(per, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((d - 0.6).abs() < 1e-15);

        let none = track(&[(0.0, 0.0, true), (1.0, 1.0, false)], &[(0.0, 0.0, true), (1.0, 1.0, true)]);
        assert!(matches!(delta_avg(&[none]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn occlusion_accuracy_examples() {
        let gt = [(0.0, 0.0, true), (0.0, 0.0, true), (0.0, 0.0, false), (0.0, 0.0, true), (0.0, 0.0, false)];
        assert_eq!(occlusion_accuracy(&[track(&gt, &gt)]).unwrap(), 1.0);
        let inv: Vec<_> = gt.iter().enumerate().map(|(t, &(x, y, v))| (x, y, if t == 0 { v } else { !v })).collect();
        assert_eq!(occlusion_accuracy(&[track(&gt, &inv)]).unwrap(), 0.0);
        let half: Vec<_> = gt.iter().enumerate().map(|(t, &(x, y, v))| (x, y, if t % 2 == 1 { !v } else { v })).collect();
        assert_eq!(occlusion_accuracy(&[track(&gt, &half)]).unwrap(), 0.5);
    }

    #[test]
    fn jaccard_examples() {
        let gt = [(5.0, 5.0, true), (6.0, 6.0, true), (7.0, 7.0, false)];
        assert_eq!(average_jaccard(&[track(&gt, &gt)]).unwrap().0, 1.0);
        let all_occ: Vec<_> = gt.iter().map(|&(x, y, _)| (x, y, false)).collect();
        assert_eq!(average_jaccard(&[track(&gt, &all_occ)]).unwrap().0, 0.0);
        // frame 1: TP at every threshold; frame 2: FP (occluded, predicted visible)
        let pred = [(5.0, 5.0, true), (6.0, 6.0, true), (7.0, 7.0, true)];
        let (aj, per) = average_jaccard(&[track(&gt, &pred)]).unwrap();
        assert_eq!(per, vec![0.5; 5]);
        assert_eq!(aj, 0.5);
        // nothing visible, nothing predicted
        let occ = [(0.0, 0.0, true), (1.0, 1.0, false)];
        let p = [(0.0, 0.0, true), (1.0, 1.0, false)];
        assert_eq!(average_jaccard(&[track(&occ, &p)]).unwrap().0, 1.0);
    }

    #[test]
    fn far_visible_prediction_is_both_miss_and_false_positive() {
        let gt = [(0.0, 0.0, true), (10.0, 10.0, true)];
        let pred = [(0.0, 0.0, true), (13.0, 10.0, true)];
        let (_, per) = average_jaccard(&[track(&gt, &pred)]).unwrap();
        // d < 3: TP 0, gt 1, FP 1 -> 0 ; d > 3: TP 1 -> 1
        assert_eq!(per, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn frames_before_query_are_ignored() {
        let mut tr = track(
            &[(0.0, 0.0, false), (0.0, 0.0, true), (9.0, 9.0, true)],
            &[(50.0, 50.0, true), (0.0, 0.0, true), (9.0, 9.0, true)],
        );
        tr.query_index = 1;
        assert_eq!(occlusion_accuracy(&[tr.clone()]).unwrap(), 1.0);
        assert_eq!(average_jaccard(&[tr]).unwrap().0, 1.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut tr = track(&[(0.0, 0.0, true), (1.0, 1.0, true)], &[(0.0, 0.0, true), (1.0, 1.0, true)]);
        tr.pred_visible.pop();
        assert!(matches!(delta_avg(&[tr]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn report_modes_and_rendering() {
        let gt = [(5.0, 5.0, true), (6.0, 6.0, true), (7.0, 7.0, false)];
        let videos = vec![vec![track(&gt, &gt)]];
        let full = MetricsReport::from_videos(&videos, EvalMode::Full, Pooling::Frame).unwrap();
        assert_eq!((full.aj, full.delta_avg, full.oa), (Some(1.0), 1.0, Some(1.0)));
        let text = full.to_string();
        assert!(text.contains("| AJ") && text.contains("1.000"));
        let zs = MetricsReport::from_videos(&videos, EvalMode::ZeroShot, Pooling::Frame).unwrap();
        assert!(zs.aj.is_none() && zs.oa.is_none());
        let json = zs.to_json();
        assert!(json.contains("delta_avg") && !json.contains("\"aj\""));
        assert!(zs.to_string().contains("-"));
    }
}
