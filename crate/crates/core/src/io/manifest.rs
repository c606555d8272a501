//! Dataset directory manifest (`manifest.json`).
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "features",
//!   "annotations": "annotations.json",
//!   "videos": [ { "id": "vid_0000", "file": "features/vid_0000.fvid", "split": "train" } ],
//!   "generator": { ... }
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. `kind` is `features` for
//! backbone feature maps and `images` for RGB frames (`FVID` with `D = 3`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::annotations::{read_annotations, AnnotationSet, VideoAnnotation};
use crate::io::features::read_feature_video;
use crate::tracker::FeatureVideo;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Features,
    Images,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub annotations: String,
    pub videos: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

/// One video's frames (features or images) with its ground truth.
#[derive(Clone, Debug)]
pub struct DatasetVideo {
    pub id: String,
    pub split: Split,
    pub video: FeatureVideo<f32>,
    pub annotation: VideoAnnotation,
}

impl DatasetManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Schema(format!(
                "{}: line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Incompatible(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.as_ref().join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

/// Load every video listed in `dir/manifest.json` and pair it with its annotation.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<DatasetVideo>)> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::read(dir)?;
    let annotations = read_annotations(dir.join(&manifest.annotations))?;
    let videos = load_entries(dir, &manifest, &annotations)?;
    Ok((manifest, videos))
}

fn load_entries(
    dir: &Path,
    manifest: &DatasetManifest,
    annotations: &AnnotationSet,
) -> Result<Vec<DatasetVideo>> {
    manifest
        .videos
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let video = read_feature_video(&path)?;
            let annotation = annotations
                .video(&e.id)
                .ok_or_else(|| Error::Schema(format!("no annotations for video {}", e.id)))?
                .clone();
            check_pairing(&video, &annotation)?;
            Ok(DatasetVideo {
                id: e.id.clone(),
                split: e.split,
                video,
                annotation,
            })
        })
        .collect()
}

pub fn check_pairing(video: &FeatureVideo<f32>, annotation: &VideoAnnotation) -> Result<()> {
    if !annotation.tracks.is_empty() && annotation.num_frames() != video.num_frames() {
        return Err(Error::Schema(format!(
            "video {}: annotations have {} frames, features have {}",
            annotation.id,
            annotation.num_frames(),
            video.num_frames()
        )));
    }
    let res = [video.source_resolution.0, video.source_resolution.1];
    if annotation.resolution != res {
        return Err(Error::Schema(format!(
            "video {}: annotation resolution {:?} differs from feature source resolution {:?}",
            annotation.id, annotation.resolution, res
        )));
    }
    Ok(())
}
