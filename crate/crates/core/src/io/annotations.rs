//! Ground-truth and prediction tracks as JSON.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "videos": [
//!     {
//!       "id": "vid_0000",
//!       "resolution": [256, 256],
//!       "tracks": [
//!         { "points": [[12.5, 40.0], ...], "visible": [true, ...] }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! `resolution` is `[height, width]` in pixels; points are `[x, y]` in those
//! pixels (continuous, the image spans `[0, width] x [0, height]`). Every track
//! of a video has one entry per frame. Prediction files use the same schema
//! and may add `"occlusion_prob"` per track.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Point;

pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub format_version: u32,
    pub videos: Vec<VideoAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotation {
    pub id: String,
    /// `[height, width]` in pixels.
    pub resolution: [u32; 2],
    pub tracks: Vec<TrackAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackAnnotation {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion_prob: Option<Vec<f64>>,
}

impl TrackAnnotation {
    pub fn point(&self, t: usize) -> Point<f64> {
        Point::new(self.points[t][0], self.points[t][1])
    }

    pub fn first_visible(&self) -> Option<usize> {
        self.visible.iter().position(|&v| v)
    }
}

impl VideoAnnotation {
    pub fn num_frames(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.points.len())
    }
}

impl AnnotationSet {
    pub fn new(videos: Vec<VideoAnnotation>) -> Self {
        Self {
            format_version: ANNOTATION_VERSION,
            videos,
        }
    }

    pub fn video(&self, id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Shape checks. Ground truth additionally needs one visible frame per track.
    pub fn validate(&self, ground_truth: bool) -> Result<()> {
        if self.format_version != ANNOTATION_VERSION {
            return Err(Error::Incompatible(format!(
                "annotation format version {} (expected {ANNOTATION_VERSION})",
                self.format_version
            )));
        }
        for v in &self.videos {
            if v.resolution[0] == 0 || v.resolution[1] == 0 {
                return Err(Error::Schema(format!("video {}: resolution must be positive", v.id)));
            }
            let t = v.num_frames();
            for (k, tr) in v.tracks.iter().enumerate() {
                if tr.points.len() != t || tr.visible.len() != t {
                    return Err(Error::Schema(format!(
                        "video {} track {k}: expected {t} points and flags, got {} and {}",
                        v.id,
                        tr.points.len(),
                        tr.visible.len()
                    )));
                }
                if let Some(p) = &tr.occlusion_prob {
                    if p.len() != t || p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                        return Err(Error::Schema(format!(
                            "video {} track {k}: occlusion_prob must hold {t} values in [0, 1]",
                            v.id
                        )));
                    }
                }
                if tr.points.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(Error::Schema(format!("video {} track {k}: non-finite point", v.id)));
                }
                if ground_truth && tr.first_visible().is_none() {
                    return Err(Error::Schema(format!(
                        "video {} track {k}: no visible frame",
                        v.id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_annotations(text: &str, ground_truth: bool) -> Result<AnnotationSet> {
    let set: AnnotationSet = serde_json::from_str(text).map_err(|e| {
        Error::Schema(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    set.validate(ground_truth)?;
    Ok(set)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    parse_annotations(&fs::read_to_string(path)?, true)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    parse_annotations(&fs::read_to_string(path)?, false)
}

pub fn write_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let text = serde_json::to_string_pretty(set).expect("annotations serialize");
    fs::write(path, text + "\n")?;
    Ok(())
}
