//! Whole-video inference: clip the video, predict every clip, link.

use crate::data::Video;
use crate::error::{Error, Result};
use crate::linking::{clip_starts, clip_tubelets, link_tubelets, LinkConfig, VideoTube};
use crate::model::{Model, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    /// Frames between clip starts; clips overlap by `T - stride` frames.
    pub stride: usize,
    pub link_iou_min: f64,
    /// Tubelets below this confidence are dropped before linking.
    pub min_confidence: f64,
}

impl InferConfig {
    /// Half-clip stride.
    pub fn for_clip_len(frames: usize) -> Self {
        Self {
            stride: (frames / 2).max(1),
            link_iou_min: 0.1,
            min_confidence: 0.0,
        }
    }
}

/// Linked tubes for a whole video. A video exactly one clip long is a single
/// clip and its tubelets pass through unchanged.
pub fn detect_video(model: &Model, params: &ModelParams, video: &Video, cfg: &InferConfig) -> Result<Vec<VideoTube>> {
    let t = model.config().frames;
    if video.frames < t {
        return Err(Error::InvalidInput(format!("video of {} frames is shorter than a clip of {t}", video.frames)));
    }
    let starts = clip_starts(video.frames, t, cfg.stride);
    let mut clips = Vec::with_capacity(starts.len());
    for &s in &starts {
        let out = model.predict(params, &video.window(s, t)?.to_tensor())?;
        clips.push(clip_tubelets(&out, s, cfg.min_confidence));
    }
    // the last window is end-aligned, so the overlap with its predecessor may exceed T - stride
    let overlap = starts.windows(2).map(|w| t - (w[1] - w[0])).min().unwrap_or(t).max(1);
    link_tubelets(
        &clips,
        &LinkConfig {
            overlap_frames: overlap,
            iou_min: cfg.link_iou_min,
        },
    )
}
