//! Supervision thinning and clip extraction around a keyframe.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::AnnotationSet;
use super::augment::TransformRecord;
use super::video::Video;
use crate::error::{Error, Result};

/// Which frames keep their labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Supervision {
    #[default]
    All,
    /// Frames `0, k, 2k, ...`.
    EveryK(usize),
    /// A single seeded frame per video.
    OnePerVideo,
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Supervision::All),
            "one_per_video" => Ok(Supervision::OnePerVideo),
            _ => s
                .strip_prefix("every_")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k > 0)
                .map(Supervision::EveryK)
                .ok_or_else(|| Error::Config(format!("unknown supervision scheme {s:?}"))),
        }
    }
}

impl TryFrom<String> for Supervision {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Supervision> for String {
    fn from(s: Supervision) -> String {
        s.to_string()
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Supervision::All => write!(f, "all"),
            Supervision::EveryK(k) => write!(f, "every_{k}"),
            Supervision::OnePerVideo => write!(f, "one_per_video"),
        }
    }
}

/// Thins the labelled mask; boxes and classes are left untouched.
pub fn subsample_supervision(ann: &AnnotationSet, scheme: Supervision, seed: u64) -> AnnotationSet {
    let labelled = ann.labelled_frames();
    let mask = match scheme {
        Supervision::All => ann.labelled_mask.clone(),
        Supervision::EveryK(k) => (0..ann.frames_total)
            .map(|t| ann.labelled_mask[t] && t % k == 0)
            .collect(),
        Supervision::OnePerVideo => {
            let mut m = vec![false; ann.frames_total];
            if !labelled.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                m[labelled[rng.random_range(0..labelled.len())]] = true;
            }
            m
        }
    };
    AnnotationSet {
        labelled_mask: mask,
        ..ann.clone()
    }
}

/// Where a clip came from and what was done to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub video_id: String,
    pub start: usize,
    /// Keyframe in video coordinates.
    pub keyframe: usize,
    /// Sampled displacement of the keyframe from the clip centre.
    pub delta: i64,
    /// True when the window had to be shifted to stay inside the video.
    pub clamped: bool,
    pub transform: Option<TransformRecord>,
}

/// A `T`-frame training clip with its windowed annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub video: Video,
    pub annotations: AnnotationSet,
    pub provenance: Provenance,
}

/// Picks a labelled keyframe and cuts a `t`-frame window that places it at
/// `t / 2 + δ`, with `δ` uniform in `[-rho, rho]`.
pub fn decenter_sample(video: &Video, ann: &AnnotationSet, t: usize, rho: usize, seed: u64) -> Result<ClipSample> {
    if video.frames != ann.frames_total {
        return Err(Error::InvalidInput(format!(
            "{}: video has {} frames, annotations {}",
            ann.video_id, video.frames, ann.frames_total
        )));
    }
    if t == 0 || video.frames < t {
        return Err(Error::InvalidInput(format!(
            "{}: cannot cut a {t}-frame clip from {} frames",
            ann.video_id, video.frames
        )));
    }
    let labelled = ann.labelled_frames();
    if labelled.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no labelled frames", ann.video_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keyframe = labelled[rng.random_range(0..labelled.len())];
    let delta = rng.random_range(-(rho as i64)..=rho as i64);
    // a displacement beyond the clip edge would leave the keyframe outside it
    let pos = ((t / 2) as i64 + delta).clamp(0, t as i64 - 1);
    let want = keyframe as i64 - pos;
    let max_start = (video.frames - t) as i64;
    let start = want.clamp(0, max_start);
    let start_u = start as usize;
    Ok(ClipSample {
        video: video.window(start_u, t)?,
        annotations: ann.window(start_u, t)?,
        provenance: Provenance {
            video_id: ann.video_id.clone(),
            start: start_u,
            keyframe,
            delta,
            clamped: start != want || pos != (t / 2) as i64 + delta,
            transform: None,
        },
    })
}

/// The whole video as one sample (used when it is exactly one clip long).
pub fn full_sample(video: &Video, ann: &AnnotationSet) -> ClipSample {
    ClipSample {
        video: video.clone(),
        annotations: ann.clone(),
        provenance: Provenance {
            video_id: ann.video_id.clone(),
            start: 0,
            keyframe: video.frames / 2,
            delta: 0,
            clamped: false,
            transform: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SceneSpec};

    fn scene(frames: usize) -> (Video, AnnotationSet) {
        let spec = SceneSpec {
            frames,
            width: 16,
            height: 16,
            ..Default::default()
        };
        generate_synthetic(&spec, 1).unwrap()
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("every_24".parse::<Supervision>().unwrap(), Supervision::EveryK(24));
        assert_eq!("all".parse::<Supervision>().unwrap(), Supervision::All);
        assert!("every_0".parse::<Supervision>().is_err());
        assert!("some".parse::<Supervision>().is_err());
        assert_eq!(Supervision::EveryK(12).to_string(), "every_12");
    }

    #[test]
    fn every_k_anchors_at_zero() {
        let (_, ann) = scene(100);
        let thin = subsample_supervision(&ann, Supervision::EveryK(24), 0);
        assert_eq!(thin.labelled_frames(), vec![0, 24, 48, 72, 96]);
        assert_eq!(thin.tubes, ann.tubes);
        assert_eq!(subsample_supervision(&ann, Supervision::All, 0), ann);
        let one = subsample_supervision(&ann, Supervision::OnePerVideo, 5);
        assert_eq!(one.labelled_frames().len(), 1);
    }

    #[test]
    fn zero_rho_centres_the_keyframe() {
        let (video, ann) = scene(64);
        for seed in 0..20 {
            let s = decenter_sample(&video, &ann, 16, 0, seed).unwrap();
            let p = &s.provenance;
            if !p.clamped {
                assert_eq!(p.keyframe - p.start, 8);
            }
            assert_eq!(s.video.frames, 16);
            assert_eq!(s.annotations.frames_total, 16);
        }
    }

    #[test]
    fn clamped_windows_are_flagged() {
        let (video, ann) = scene(20);
        let thin = subsample_supervision(&ann, Supervision::EveryK(100), 0);
        let s = decenter_sample(&video, &thin, 16, 0, 0).unwrap();
        assert_eq!(s.provenance.keyframe, 0);
        assert_eq!(s.provenance.start, 0);
        assert!(s.provenance.clamped);
        assert!(decenter_sample(&video, &ann, 21, 0, 0).is_err());
    }
}
