//! Synthetic RGB videos for backbone adaptation.
//!
//! Each video has a static, smooth random background (a coarse grid of random
//! colors, bilinearly upsampled) with fresh per-pixel noise every frame. Each
//! track is a small Gaussian sprite of its own random color following a damped
//! random walk in pixels; occluded frames do not draw the sprite. Frames are
//! stored as `FVID` with `D = 3` and stride 1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::annotations::{AnnotationSet, TrackAnnotation, VideoAnnotation};
use crate::io::manifest::{DatasetKind, DatasetManifest, DatasetVideo, Split};
use crate::rng::SeededRng;
use crate::synth::{sample_paths, video_id, write_dataset_dir, MotionConfig};
use crate::tensor::{resize_bilinear, Grid};
use crate::tracker::FeatureVideo;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSynthConfig {
    pub num_videos: usize,
    pub frames: usize,
    pub tracks: usize,
    /// Square frame side in pixels.
    pub resolution: usize,
    /// Side of the coarse background color grid.
    pub background_cells: usize,
    /// Std of the sprite's Gaussian profile, pixels.
    pub sprite_sigma: f64,
    /// Motion in pixels per frame.
    pub motion: MotionConfig,
    pub occlusion_rate: f64,
    /// Std of the per-frame pixel noise.
    pub noise: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ImageSynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 16,
            frames: 8,
            tracks: 4,
            resolution: 64,
            background_cells: 8,
            sprite_sigma: 2.0,
            motion: MotionConfig {
                momentum: 0.8,
                accel_std: 1.5,
                max_speed: 4.0,
            },
            occlusion_rate: 0.0,
            noise: 0.02,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl ImageSynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_videos == 0 || self.frames == 0 || self.tracks == 0 {
            return bad("num_videos, frames and tracks must be positive");
        }
        if self.resolution == 0 || self.background_cells == 0 {
            return bad("resolution and background_cells must be positive");
        }
        if self.tracks > self.resolution * self.resolution {
            return bad("more tracks than pixels");
        }
        if !(self.sprite_sigma > 0.0) || !(self.noise >= 0.0) {
            return bad("sprite_sigma must be positive and noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(0.0..=1.0).contains(&self.val_fraction) {
            return bad("occlusion_rate and val_fraction must lie in [0, 1]");
        }
        Ok(())
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

#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub config: ImageSynthConfig,
    pub videos: Vec<(String, Split, FeatureVideo<f32>)>,
    pub annotations: AnnotationSet,
}

pub fn synth_images(config: &ImageSynthConfig) -> Result<ImageDataset> {
    config.validate()?;
    let mut videos = Vec::with_capacity(config.num_videos);
    let mut anns = Vec::with_capacity(config.num_videos);
    for k in 0..config.num_videos {
        let mut rng = SeededRng::derived(config.seed, k as u64 + 1);
        let (video, ann) = generate(config, &video_id(k), &mut rng)?;
        videos.push((video_id(k), config.split_of(k), video));
        anns.push(ann);
    }
    Ok(ImageDataset {
        config: config.clone(),
        videos,
        annotations: AnnotationSet::new(anns),
    })
}

fn generate(
    config: &ImageSynthConfig,
    id: &str,
    rng: &mut SeededRng,
) -> Result<(FeatureVideo<f32>, VideoAnnotation)> {
    let r = config.resolution;
    let b = config.background_cells;
    let coarse: Grid<f64> = Grid::from_fn(3, b, b, |_, _, _| rng.uniform());
    let background = resize_bilinear(&coarse, r, r)?;
    let colors: Vec<[f64; 3]> = (0..config.tracks)
        .map(|_| [rng.uniform(), rng.uniform(), rng.uniform()])
        .collect();
    let paths = sample_paths(
        config.tracks,
        config.frames,
        r,
        r,
        &config.motion,
        true,
        config.occlusion_rate,
        rng,
    );
    let reach = (3.0 * config.sprite_sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * config.sprite_sigma * config.sprite_sigma);
    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let mut img = background.clone();
        if config.noise > 0.0 {
            for v in img.data_mut() {
                *v += config.noise * rng.normal();
            }
        }
        for (k, color) in colors.iter().enumerate() {
            if !paths.visible[k][t] {
                continue;
            }
            let p = paths.positions[k][t];
            let (ci, cj) = (p.y.round() as isize, p.x.round() as isize);
            for i in (ci - reach).max(0)..=(ci + reach).min(r as isize - 1) {
                for j in (cj - reach).max(0)..=(cj + reach).min(r as isize - 1) {
                    let (dy, dx) = (i as f64 - p.y, j as f64 - p.x);
                    let a = (-(dx * dx + dy * dy) * inv).exp();
                    for (c, &col) in color.iter().enumerate() {
                        let px = img.get_mut(c, i as usize, j as usize);
                        *px = (1.0 - a) * *px + a * col;
                    }
                }
            }
        }
        frames.push(img.cast::<f32>());
    }
    let tracks = (0..config.tracks)
        .map(|k| TrackAnnotation {
            points: paths.positions[k].iter().map(|p| [p.x + 0.5, p.y + 0.5]).collect(),
            visible: paths.visible[k].clone(),
            occlusion_prob: None,
        })
        .collect();
    Ok((
        FeatureVideo::new(frames, 1, (r as u32, r as u32))?,
        VideoAnnotation {
            id: id.to_string(),
            resolution: [r as u32, r as u32],
            tracks,
        },
    ))
}

impl ImageDataset {
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
            DatasetKind::Images,
            &self.videos,
            &self.annotations,
            serde_json::json!({ "synthetic_images": self.config }),
        )
    }
}
