//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubelet_core::eval::{FrameDetection, FrameGroundTruth};
use tubelet_core::matching::{CostTensor, FrameCost};
use tubelet_core::model::{EncoderConfig, ModelConfig, Tensor};
use tubelet_core::BBox;

/// `n x m` costs uniform in `[0, 10)`.
pub fn cost_matrix(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..m).map(|_| rng.random::<f64>() * 10.0).collect()).collect()
}

/// `frames` labelled frames, each showing every one of `actors` actors.
pub fn cost_tensor(actors: usize, slots: usize, frames: usize, seed: u64) -> CostTensor {
    CostTensor {
        slots,
        frames: (0..frames)
            .map(|t| FrameCost {
                frame: t,
                actors: (0..actors as u64).collect(),
                cost: cost_matrix(actors, slots, seed.wrapping_add(t as u64)),
            })
            .collect(),
    }
}

/// The 16-frame 64x64 model the harness trains by default.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        frames: 16,
        queries: 4,
        classes: 4,
        layers: 2,
        d_dec: 32,
        d_mlp: 64,
        heads: 2,
        height: 64,
        width: 64,
        channels: 3,
        encoder: EncoderConfig {
            patch_t: 2,
            patch_hw: 16,
            d_enc: 32,
            layers_spatial: 1,
            layers_temporal: 1,
            heads: 2,
            d_mlp: 64,
        },
        ..Default::default()
    }
}

pub fn clip(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    let data = (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(&shape, data).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
    )
}

/// `frames` frames of `gt_per_frame` boxes each, with `dets_per_gt`
/// jittered detections per box, over `classes` classes.
pub fn detection_problem(
    frames: usize,
    gt_per_frame: usize,
    dets_per_gt: usize,
    classes: usize,
    seed: u64,
) -> (Vec<FrameDetection>, Vec<FrameGroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for frame in 0..frames {
        for _ in 0..gt_per_frame {
            let b = random_box(&mut rng);
            let class_id = rng.random_range(0..classes);
            for _ in 0..dets_per_gt {
                let [cx, cy, w, h] = b.to_array();
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.03..0.03);
                dets.push(FrameDetection {
                    video_id: "v".into(),
                    frame,
                    class_id: rng.random_range(0..classes),
                    score: rng.random(),
                    bbox: BBox::new(cx + j(&mut rng), cy + j(&mut rng), w, h),
                });
            }
            gts.push(FrameGroundTruth {
                video_id: "v".into(),
                frame,
                class_id,
                bbox: b,
            });
        }
    }
    (dets, gts)
}
