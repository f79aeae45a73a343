use proptest::prelude::*;
use tubelet_core::data::{
    augment, decenter_sample, full_sample, generate_synthetic, subsample_supervision, transform_annotations, Affine,
    AnnotationSet, AugmentConfig, SceneSpec, Supervision, TubeAnnotation, Video,
};
use tubelet_core::geometry::BBox;

fn long_annotations(frames: usize) -> AnnotationSet {
    AnnotationSet {
        video_id: "long".into(),
        frames_total: frames,
        width: 32,
        height: 32,
        tubes: vec![TubeAnnotation {
            actor_id: 3,
            class_ids: vec![vec![0]; frames],
            boxes: (0..frames).map(|t| [0.4 + 0.002 * t as f64, 0.5, 0.3, 0.2]).collect(),
            present: vec![true; frames],
        }],
        labelled_mask: vec![true; frames],
    }
}

fn affine() -> impl Strategy<Value = Affine> {
    (0.5..1.0f64, 0.0..1.0f64, 0.0..1.0f64, any::<bool>()).prop_map(|(s, ux, uy, flip)| {
        let a = Affine::scale(s, ux * (1.0 - s), uy * (1.0 - s));
        if flip {
            a.then(&Affine::hflip())
        } else {
            a
        }
    })
}

fn boxes_close(a: &AnnotationSet, b: &AnnotationSet) -> bool {
    a.tubes.len() == b.tubes.len()
        && a.tubes.iter().zip(&b.tubes).all(|(x, y)| {
            x.present == y.present
                && x.boxes.iter().zip(&y.boxes).all(|(p, q)| p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn transform_chains_compose(chain in prop::collection::vec(affine(), 1..5), seed in 0u64..50) {
        let (_, ann) = generate_synthetic(&SceneSpec { frames: 3, ..Default::default() }, seed).unwrap();
        let stepwise = chain.iter().fold(ann.clone(), |acc, a| transform_annotations(&acc, a, &[]));
        let composed = chain.iter().skip(1).fold(chain[0], |acc, a| acc.then(a));
        prop_assert!(boxes_close(&stepwise, &transform_annotations(&ann, &composed, &[])));
    }

    #[test]
    fn augmented_boxes_follow_the_recorded_map(seed in any::<u64>(), scene in 0u64..20) {
        let (v, ann) = generate_synthetic(&SceneSpec { frames: 2, ..Default::default() }, scene).unwrap();
        let cfg = AugmentConfig { scale_min: 0.5, scale_max: 1.0, hflip_prob: 0.5, seed, ..Default::default() };
        let out = augment(&full_sample(&v, &ann), &cfg).unwrap();
        let rec = out.provenance.transform.clone().unwrap();
        prop_assert!((0.5..=1.0).contains(&rec.scale));
        for (a, b) in ann.tubes.iter().zip(&out.annotations.tubes) {
            for t in 0..2 {
                let expect = rec.affine.apply_box(&BBox::from_array(a.boxes[t])).to_array();
                prop_assert!(expect.iter().zip(&b.boxes[t]).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
        prop_assert_eq!(augment(&full_sample(&v, &ann), &cfg).unwrap(), out);
    }

    #[test]
    fn thinning_only_touches_the_mask(k in 1usize..40, seed in any::<u64>(), scheme in 0u8..3) {
        let ann = long_annotations(100);
        let s = match scheme {
            0 => Supervision::All,
            1 => Supervision::EveryK(k),
            _ => Supervision::OnePerVideo,
        };
        let out = subsample_supervision(&ann, s, seed);
        prop_assert_eq!(&out.tubes, &ann.tubes);
        prop_assert_eq!(out.frames_total, ann.frames_total);
        prop_assert!(out.labelled_frames().iter().all(|t| ann.labelled_mask[*t]));
        if let Supervision::EveryK(k) = s {
            prop_assert_eq!(out.labelled_frames(), (0..100).step_by(k).collect::<Vec<_>>());
        }
    }
}

#[test]
fn supervision_schemes() {
    let ann = long_annotations(100);
    assert_eq!(subsample_supervision(&ann, Supervision::All, 0), ann);
    assert_eq!(subsample_supervision(&ann, Supervision::EveryK(24), 0).labelled_frames(), vec![0, 24, 48, 72, 96]);
    for seed in 0..20 {
        assert_eq!(subsample_supervision(&ann, Supervision::OnePerVideo, seed).labelled_frames().len(), 1);
    }
}

#[test]
fn keyframe_displacement_is_uniform() {
    let (frames, t, rho) = (64, 16, 4usize);
    let mut ann = long_annotations(frames);
    ann.labelled_mask = (0..frames).map(|f| f == 32).collect();
    let video = Video::filled(frames, 4, 4, 1, 0);
    let mut counts = [0usize; 9];
    let draws = 10_000;
    for seed in 0..draws {
        let s = decenter_sample(&video, &ann, t, rho, seed).unwrap();
        let p = &s.provenance;
        assert!(!p.clamped);
        assert_eq!(p.keyframe as i64 - p.start as i64, (t / 2) as i64 + p.delta);
        counts[(p.delta + rho as i64) as usize] += 1;
    }
    let expect = draws as f64 / 9.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 8 degrees of freedom, 0.1% critical value
    assert!(chi2 < 26.12, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn centred_keyframe_without_displacement() {
    let ann = long_annotations(40);
    let video = Video::filled(40, 4, 4, 1, 0);
    for seed in 0..50 {
        let p = decenter_sample(&video, &ann, 16, 0, seed).unwrap().provenance;
        if !p.clamped {
            assert_eq!(p.keyframe - p.start, 8);
        }
    }
}

#[test]
fn wide_displacement_clamps_to_the_video() {
    let ann = long_annotations(24);
    let video = Video::filled(24, 4, 4, 1, 0);
    let mut clamped = 0;
    for seed in 0..200 {
        let s = decenter_sample(&video, &ann, 16, 16, seed).unwrap();
        let p = &s.provenance;
        assert!(p.delta.abs() <= 16);
        assert!(p.start + 16 <= 24);
        assert!((p.start..p.start + 16).contains(&p.keyframe));
        assert_eq!(s.annotations.frames_total, 16);
        clamped += p.clamped as usize;
    }
    assert!(clamped > 0);
}

#[test]
fn synthetic_scenes_are_reproducible() {
    let spec = SceneSpec::default();
    assert_eq!(generate_synthetic(&spec, 7).unwrap(), generate_synthetic(&spec, 7).unwrap());
    assert_ne!(generate_synthetic(&spec, 7).unwrap().1, generate_synthetic(&spec, 8).unwrap().1);
}
