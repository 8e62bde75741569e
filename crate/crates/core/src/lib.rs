//! Reference-anchored dense 3D point tracking with a small video
//! transformer.
//!
//! Every numeric routine is generic over [`scalar::Scalar`]; training and
//! inference use `f32`, property tests and gradient checks use `f64`.

pub mod dit;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod latentcodec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synthscene;
pub mod tensor;
pub mod trainer;

pub use dit::ModelConfig;
pub use error::{Error, Result};
pub use inference::{predict_clip, predict_long_video, InferenceOptions, Prediction, VideoInput};
pub use metrics::{evaluate, EvalResult, MetricOptions};
pub use model::Tracker;
pub use scalar::Scalar;
pub use synthscene::{generate_clip, SceneDistribution, SceneSpec, TrackClip};
pub use trainer::{train, TrainConfig, TrainingExample};

pub type Tracker32 = Tracker<f32>;
pub type Tracker64 = Tracker<f64>;
pub type Pointmap32 = geometry::Pointmap<f32>;
pub type Pointmap64 = geometry::Pointmap<f64>;
pub type TrackClip32 = TrackClip<f32>;
pub type TrackClip64 = TrackClip<f64>;
pub type Mat32 = tensor::Mat<f32>;
pub type Mat64 = tensor::Mat<f64>;
