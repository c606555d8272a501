//! Synthetic feature videos with exact ground-truth tracks.
//!
//! Every track owns a unit feature vector (mutually orthogonal when the
//! feature dimension allows). Each frame starts from background noise
//! (i.i.d. Gaussian vectors with expected norm `noise`), and every visible
//! track adds its vector at its current position, bilinearly splatted over the
//! surrounding cells. Occluded frames skip the splat. Motion is a damped random
//! walk on velocity, reflected at the grid border.
//!
//! With `noise = 0`, no occlusion and cell-centered positions, zero-shot
//! argmax tracking recovers every track exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::annotations::{AnnotationSet, TrackAnnotation, VideoAnnotation};
use crate::io::features::write_feature_video;
use crate::io::manifest::{
    DatasetKind, DatasetManifest, DatasetVideo, ManifestEntry, Split, MANIFEST_VERSION,
};
use crate::io::write_annotations;
use crate::rng::SeededRng;
use crate::tensor::{bilinear_taps, Grid, Point};
use crate::tracker::FeatureVideo;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// Velocity carried over between frames.
    pub momentum: f64,
    /// Std of the per-frame velocity perturbation, in cells.
    pub accel_std: f64,
    /// Speed cap per axis, in cells per frame.
    pub max_speed: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            momentum: 0.8,
            accel_std: 0.35,
            max_speed: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub frames: usize,
    pub tracks: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    /// Pixels per cell; the source resolution is `grid * stride`.
    pub stride: u32,
    pub motion: MotionConfig,
    /// Keep positions continuous instead of snapping them to cell centers.
    pub subcell: bool,
    /// Probability that a frame after the first is occluded.
    pub occlusion_rate: f64,
    /// Expected norm of the background vectors.
    pub noise: f64,
    /// Fraction of videos (rounded down) placed in the validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_videos: 16,
            frames: 24,
            tracks: 8,
            grid_h: 32,
            grid_w: 32,
            feature_dim: 32,
            stride: 8,
            motion: MotionConfig::default(),
            subcell: false,
            occlusion_rate: 0.0,
            noise: 0.0,
            val_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_videos == 0 || self.frames == 0 || self.tracks == 0 {
            return bad("num_videos, frames and tracks must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.feature_dim == 0 || self.stride == 0 {
            return bad("grid, feature_dim and stride must be positive".into());
        }
        if self.tracks > self.grid_h * self.grid_w {
            return bad(format!(
                "{} tracks do not fit in a {}x{} grid",
                self.tracks, self.grid_h, self.grid_w
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(0.0..=1.0).contains(&self.val_fraction) {
            return bad("occlusion_rate and val_fraction must lie in [0, 1]".into());
        }
        let m = &self.motion;
        if !(m.accel_std >= 0.0 && m.max_speed >= 0.0 && (0.0..=1.0).contains(&m.momentum)) {
            return bad("motion parameters out of range".into());
        }
        Ok(())
    }

    pub fn source_resolution(&self) -> (u32, u32) {
        (self.grid_h as u32 * self.stride, self.grid_w as u32 * self.stride)
    }

    fn split_of(&self, k: usize) -> Split {
        let n_val = (self.num_videos as f64 * self.val_fraction).floor() as usize;
        if k >= self.num_videos - n_val {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// Ground-truth motion of one video in grid units.
#[derive(Clone, Debug)]
pub struct TrackPaths {
    pub positions: Vec<Vec<Point<f64>>>,
    pub visible: Vec<Vec<bool>>,
}

/// Distinct unit vectors; orthonormal when `dim >= count`.
pub fn track_vectors(count: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

/// Random-walk trajectories starting from distinct cells, plus visibility.
pub fn sample_paths(
    tracks: usize,
    frames: usize,
    grid_h: usize,
    grid_w: usize,
    motion: &MotionConfig,
    subcell: bool,
    occlusion_rate: f64,
    rng: &mut SeededRng,
) -> TrackPaths {
    let mut cells: Vec<usize> = (0..grid_h * grid_w).collect();
    rng.shuffle(&mut cells);
    let (maxx, maxy) = ((grid_w - 1) as f64, (grid_h - 1) as f64);
    let mut positions = Vec::with_capacity(tracks);
    let mut visible = Vec::with_capacity(tracks);
    for &cell in cells.iter().take(tracks) {
        let mut p = Point::new((cell % grid_w) as f64, (cell / grid_w) as f64);
        if subcell {
            p.x = (p.x + rng.uniform_range(-0.5, 0.5)).clamp(0.0, maxx);
            p.y = (p.y + rng.uniform_range(-0.5, 0.5)).clamp(0.0, maxy);
        }
        let mut v = (
            rng.normal() * motion.accel_std,
            rng.normal() * motion.accel_std,
        );
        let mut path = Vec::with_capacity(frames);
        let mut vis = Vec::with_capacity(frames);
        for t in 0..frames {
            if t > 0 {
                v.0 = (motion.momentum * v.0 + motion.accel_std * rng.normal())
                    .clamp(-motion.max_speed, motion.max_speed);
                v.1 = (motion.momentum * v.1 + motion.accel_std * rng.normal())
                    .clamp(-motion.max_speed, motion.max_speed);
                p.x += v.0;
                p.y += v.1;
                if p.x < 0.0 || p.x > maxx {
                    p.x = p.x.clamp(0.0, maxx);
                    v.0 = -v.0;
                }
                if p.y < 0.0 || p.y > maxy {
                    p.y = p.y.clamp(0.0, maxy);
                    v.1 = -v.1;
                }
            }
            let occluded = t > 0 && rng.uniform() < occlusion_rate;
            let q = if subcell {
                p
            } else {
                Point::new(p.x.round(), p.y.round())
            };
            path.push(q);
            vis.push(!occluded);
        }
        positions.push(path);
        visible.push(vis);
    }
    TrackPaths { positions, visible }
}

/// In-memory synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub videos: Vec<(String, Split, FeatureVideo<f32>)>,
    pub annotations: AnnotationSet,
}

pub fn video_id(k: usize) -> String {
    format!("vid_{k:04}")
}

/// Generate the whole dataset; a pure function of the config.
pub fn synth_generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut videos = Vec::with_capacity(config.num_videos);
    let mut annotations = Vec::with_capacity(config.num_videos);
    for k in 0..config.num_videos {
        let mut rng = SeededRng::derived(config.seed, k as u64 + 1);
        let (video, ann) = generate_video(config, &video_id(k), &mut rng)?;
        videos.push((video_id(k), config.split_of(k), video));
        annotations.push(ann);
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        videos,
        annotations: AnnotationSet::new(annotations),
    })
}

fn generate_video(
    config: &SyntheticConfig,
    id: &str,
    rng: &mut SeededRng,
) -> Result<(FeatureVideo<f32>, VideoAnnotation)> {
    let (h, w, d) = (config.grid_h, config.grid_w, config.feature_dim);
    let vectors = track_vectors(config.tracks, d, rng);
    let paths = sample_paths(
        config.tracks,
        config.frames,
        h,
        w,
        &config.motion,
        config.subcell,
        config.occlusion_rate,
        rng,
    );
    let bg_scale = config.noise / (d as f64).sqrt();
    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let mut f: Grid<f64> = if config.noise > 0.0 {
            Grid::from_fn(d, h, w, |_, _, _| bg_scale * rng.normal())
        } else {
            Grid::zeros(d, h, w)
        };
        for (k, u) in vectors.iter().enumerate() {
            if !paths.visible[k][t] {
                continue;
            }
            for (i, j, wt) in bilinear_taps(paths.positions[k][t], h, w)? {
                if wt == 0.0 {
                    continue;
                }
                for (c, &uc) in u.iter().enumerate() {
                    *f.get_mut(c, i, j) += wt * uc;
                }
            }
        }
        frames.push(f.cast::<f32>());
    }
    let stride = config.stride as f64;
    let tracks = (0..config.tracks)
        .map(|k| TrackAnnotation {
            points: paths.positions[k]
                .iter()
                .map(|p| [(p.x + 0.5) * stride, (p.y + 0.5) * stride])
                .collect(),
            visible: paths.visible[k].clone(),
            occlusion_prob: None,
        })
        .collect();
    let res = config.source_resolution();
    Ok((
        FeatureVideo::new(frames, config.stride, res)?,
        VideoAnnotation {
            id: id.to_string(),
            resolution: [res.0, res.1],
            tracks,
        },
    ))
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Write `manifest.json`, `annotations.json` and one `.fvid` per video under
/// `subdir` (`features` or `images`).
pub(crate) fn write_dataset_dir(
    dir: &Path,
    kind: DatasetKind,
    videos: &[(String, Split, FeatureVideo<f32>)],
    annotations: &AnnotationSet,
    generator: serde_json::Value,
) -> Result<DatasetManifest> {
    let subdir = match kind {
        DatasetKind::Features => "features",
        DatasetKind::Images => "images",
    };
    fs::create_dir_all(dir.join(subdir))?;
    let mut entries = Vec::with_capacity(videos.len());
    for (id, split, video) in videos {
        let file = format!("{subdir}/{id}.fvid");
        write_feature_video(dir.join(&file), video)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            file,
            split: *split,
        });
    }
    write_annotations(dir.join(ANNOTATIONS_FILE), annotations)?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        kind,
        annotations: ANNOTATIONS_FILE.into(),
        videos: entries,
        generator: Some(generator),
    };
    manifest.write(dir)?;
    Ok(manifest)
}

impl SyntheticDataset {
    /// The dataset as loaded from disk would be, without a round trip.
    pub fn dataset_videos(&self) -> Vec<DatasetVideo> {
        self.videos
            .iter()
            .zip(&self.annotations.videos)
            .map(|((id, split, video), ann)| DatasetVideo {
                id: id.clone(),
                split: *split,
                video: video.clone(),
                annotation: ann.clone(),
            })
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        write_dataset_dir(
            dir.as_ref(),
            DatasetKind::Features,
            &self.videos,
            &self.annotations,
            serde_json::json!({ "synthetic_features": self.config }),
        )
    }
}
