//! Annotations, synthetic scenes, clip sampling and augmentation.

mod annotation;
mod augment;
mod sampling;
mod synth;
mod video;

pub use annotation::{background_target, AnnotationSet, Instance, TubeAnnotation};
pub use augment::{augment, transform_annotations, warp_video, Affine, AugmentConfig, TransformRecord};
pub use sampling::{decenter_sample, full_sample, subsample_supervision, ClipSample, Provenance, Supervision};
pub use synth::{generate_dataset, generate_synthetic, Motion, SceneSpec};
pub use video::Video;
