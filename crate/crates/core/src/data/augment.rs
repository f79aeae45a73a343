//! Geometric clip augmentation: scale (zoom in or out), horizontal flip and
//! box jitter. Pixels and boxes go through the same axis-aligned affine map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::AnnotationSet;
use super::sampling::ClipSample;
use super::video::Video;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Corners};

const PAD: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest keyframe displacement from the clip centre, in frames.
    pub rho: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    /// Standard deviation of the per-tube box offset, in normalised units.
    pub box_jitter_std: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rho: 0,
            scale_min: 1.0,
            scale_max: 1.0,
            hflip_prob: 0.0,
            box_jitter_std: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.box_jitter_std >= 0.0) {
            return Err(Error::Config("box_jitter_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.scale_min == 1.0 && self.scale_max == 1.0 && self.hflip_prob == 0.0 && self.box_jitter_std == 0.0
    }
}

/// `x' = sx·x + tx`, `y' = sy·y + ty` in normalised frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Uniform scale `s` placing the scaled frame at offset `(tx, ty)`.
    pub fn scale(s: f64, tx: f64, ty: f64) -> Self {
        Affine { sx: s, sy: s, tx, ty }
    }

    pub fn hflip() -> Self {
        Affine {
            sx: -1.0,
            sy: 1.0,
            tx: 1.0,
            ty: 0.0,
        }
    }

    /// Apply `self`, then `next`.
    pub fn then(&self, next: &Affine) -> Affine {
        Affine {
            sx: next.sx * self.sx,
            sy: next.sy * self.sy,
            tx: next.sx * self.tx + next.tx,
            ty: next.sy * self.ty + next.ty,
        }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (self.sx * x + self.tx, self.sy * y + self.ty)
    }

    /// The mapped box, without clipping to the frame.
    pub fn apply_box(&self, b: &BBox) -> BBox {
        let c = b.corners();
        let (ax, ay) = self.apply_point(c.x0, c.y0);
        let (bx, by) = self.apply_point(c.x1, c.y1);
        BBox::from_corners(Corners {
            x0: ax.min(bx),
            y0: ay.min(by),
            x1: ax.max(bx),
            y1: ay.max(by),
        })
    }
}

/// What [`augment`] did to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub scale: f64,
    pub flip: bool,
    pub affine: Affine,
    /// Per-actor `[dcx, dcy, dw, dh]` added after the affine map.
    pub jitter: Vec<(u64, [f64; 4])>,
}

/// Nearest-neighbour warp of every frame through `a`; uncovered pixels are padded.
pub fn warp_video(video: &Video, a: &Affine) -> Video {
    let (w, h) = (video.width, video.height);
    let mut out = Video::filled(video.frames, h, w, video.channels, PAD);
    let src_x: Vec<Option<usize>> = (0..w)
        .map(|x| {
            let u = ((x as f64 + 0.5) / w as f64 - a.tx) / a.sx;
            let sx = (u * w as f64).floor();
            (sx >= 0.0 && sx < w as f64).then_some(sx as usize)
        })
        .collect();
    let src_y: Vec<Option<usize>> = (0..h)
        .map(|y| {
            let v = ((y as f64 + 0.5) / h as f64 - a.ty) / a.sy;
            let sy = (v * h as f64).floor();
            (sy >= 0.0 && sy < h as f64).then_some(sy as usize)
        })
        .collect();
    for t in 0..video.frames {
        for (y, sy) in src_y.iter().enumerate() {
            let Some(sy) = *sy else { continue };
            for (x, sx) in src_x.iter().enumerate() {
                let Some(sx) = *sx else { continue };
                let o = out.offset(t, y, x);
                let i = video.offset(t, sy, sx);
                out.data[o..o + video.channels].copy_from_slice(&video.data[i..i + video.channels]);
            }
        }
    }
    out
}

/// Maps every present box through `a`, adds the per-actor jitter, clips to
/// the frame and drops boxes left with no area.
pub fn transform_annotations(ann: &AnnotationSet, a: &Affine, jitter: &[(u64, [f64; 4])]) -> AnnotationSet {
    let mut out = ann.clone();
    for tube in &mut out.tubes {
        let j = jitter
            .iter()
            .find(|(id, _)| *id == tube.actor_id)
            .map_or([0.0; 4], |(_, j)| *j);
        for t in 0..tube.present.len() {
            if !tube.present[t] {
                continue;
            }
            let mapped = a.apply_box(&BBox::from_array(tube.boxes[t]));
            let jittered = BBox::new(
                mapped.cx + j[0],
                mapped.cy + j[1],
                (mapped.w + j[2]).max(0.0),
                (mapped.h + j[3]).max(0.0),
            );
            match jittered.clip_unit() {
                Some(b) => tube.boxes[t] = b.to_array(),
                None => {
                    tube.present[t] = false;
                    tube.class_ids[t].clear();
                    tube.boxes[t] = [0.0; 4];
                }
            }
        }
    }
    out.tubes.retain(|t| t.present.iter().any(|&p| p));
    out
}

/// Samples a transform from `cfg` (seeded by `cfg.seed`) and applies it.
pub fn augment(sample: &ClipSample, cfg: &AugmentConfig) -> Result<ClipSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (cfg.scale_min.ln(), cfg.scale_max.ln());
    let scale = if hi > lo { rng.random_range(lo..=hi).exp() } else { cfg.scale_min };
    let (ux, uy): (f64, f64) = (rng.random(), rng.random());
    let mut affine = Affine::scale(scale, ux * (1.0 - scale), uy * (1.0 - scale));
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    if flip {
        affine = affine.then(&Affine::hflip());
    }
    let jitter: Vec<(u64, [f64; 4])> = if cfg.box_jitter_std > 0.0 {
        let n = Normal::new(0.0, cfg.box_jitter_std).map_err(|e| Error::Config(e.to_string()))?;
        sample
            .annotations
            .tubes
            .iter()
            .map(|t| (t.actor_id, [0; 4].map(|_| n.sample(&mut rng))))
            .collect()
    } else {
        Vec::new()
    };
    let video = if affine == Affine::IDENTITY {
        sample.video.clone()
    } else {
        warp_video(&sample.video, &affine)
    };
    let annotations = transform_annotations(&sample.annotations, &affine, &jitter);
    let mut provenance = sample.provenance.clone();
    provenance.transform = Some(TransformRecord {
        scale,
        flip,
        affine,
        jitter,
    });
    Ok(ClipSample {
        video,
        annotations,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sampling::full_sample;
    use crate::data::synth::{generate_synthetic, SceneSpec};

    fn sample() -> ClipSample {
        let spec = SceneSpec {
            frames: 4,
            ..Default::default()
        };
        let (v, a) = generate_synthetic(&spec, 2).unwrap();
        full_sample(&v, &a)
    }

    #[test]
    fn identity_config_leaves_boxes_alone() {
        let s = sample();
        let out = augment(&s, &AugmentConfig::default()).unwrap();
        assert_eq!(out.annotations, s.annotations);
        assert_eq!(out.video, s.video);
    }

    #[test]
    fn flip_mirrors_centres() {
        let s = sample();
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..Default::default()
        };
        let out = augment(&s, &cfg).unwrap();
        for (a, b) in s.annotations.tubes.iter().zip(&out.annotations.tubes) {
            for t in 0..4 {
                assert!((b.boxes[t][0] - (1.0 - a.boxes[t][0])).abs() < 1e-12);
                assert_eq!(b.boxes[t][2], a.boxes[t][2]);
            }
        }
        assert_eq!(out.video.pixel(0, 3, 0), s.video.pixel(0, 3, 63));
    }

    #[test]
    fn centred_zoom_out_quarters_areas_in_pixels() {
        let mut v = Video::filled(1, 64, 64, 1, 10);
        for y in 16..40 {
            for x in 8..32 {
                v.pixel_mut(0, y, x)[0] = 200;
            }
        }
        let a = Affine::scale(0.5, 0.25, 0.25);
        let out = warp_video(&v, &a);
        let painted = out.data.iter().filter(|&&p| p == 200).count();
        assert_eq!(painted, 24 * 24 / 4);
        let b = a.apply_box(&BBox::from_corners(Corners {
            x0: 8.0 / 64.0,
            y0: 16.0 / 64.0,
            x1: 32.0 / 64.0,
            y1: 40.0 / 64.0,
        }));
        assert!((b.area() * 64.0 * 64.0 - painted as f64).abs() < 1e-9);
    }

    #[test]
    fn zoom_in_drops_boxes_pushed_out_of_frame() {
        let s = sample();
        // keep only the top-left quarter, magnified
        let a = Affine::scale(2.0, 0.0, 0.0);
        let out = transform_annotations(&s.annotations, &a, &[]);
        for tube in &out.tubes {
            for t in 0..4 {
                if tube.present[t] {
                    assert!(BBox::from_array(tube.boxes[t]).is_valid());
                    assert!(!tube.class_ids[t].is_empty());
                }
            }
        }
    }
}
