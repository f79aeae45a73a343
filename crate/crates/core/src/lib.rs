//! Set-prediction tubelet detection for video: a factorised transformer with
//! manual backpropagation, Hungarian-matched losses, sparse-keyframe training,
//! causal tubelet linking and Frame/Video AP evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod infer;
pub mod linking;
pub mod loss;
pub mod matching;
pub mod model;
pub mod render;
pub mod train;

pub use data::{AnnotationSet, AugmentConfig, SceneSpec, Supervision, Video};
pub use error::{Error, Result};
pub use eval::{ApReport, VideoApSummary};
pub use geometry::{BBox, Tube};
pub use linking::{PredictionRecord, VideoTube};
pub use loss::LossConfig;
pub use matching::{Assignment, MatchingMode};
pub use model::{AttentionMode, Model, ModelConfig, ModelParams, QueryMode, TubeletSet};
pub use train::{OptimConfig, TrainConfig};
