pub mod adapt;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod predict;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod synth_images;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

/// Storage precision of serialized features.
pub type Grid32 = tensor::Grid<f32>;
/// Working precision for training, gradients and checks.
pub type Grid64 = tensor::Grid<f64>;
pub type Point64 = tensor::Point<f64>;
pub type FeatureVideo32 = tracker::FeatureVideo<f32>;
pub type FeatureVideo64 = tracker::FeatureVideo<f64>;
pub type ProbeParams64 = probe::ProbeParams<f64>;
pub type ViTParams64 = vit::ViTParams<f64>;
pub type LoRAViTParams64 = vit::LoRAViTParams<f64>;
