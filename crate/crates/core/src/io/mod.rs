//! On-disk formats: feature videos (binary), annotations and manifests (JSON),
//! checkpoints (binary with a JSON config echo).

pub mod annotations;
pub mod checkpoint;
pub mod features;
pub mod manifest;

pub use annotations::{
    read_annotations, read_predictions, write_annotations, AnnotationSet, TrackAnnotation,
    VideoAnnotation,
};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind};
pub use features::{read_feature_video, write_feature_video, FeatureFileHeader};
pub use manifest::{load_dataset, DatasetKind, DatasetManifest, DatasetVideo, ManifestEntry, Split};
