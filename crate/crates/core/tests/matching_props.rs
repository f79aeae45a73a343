mod common;

use common::oracle::{exhaustive_assignment, random_cost_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tubelet_core::data::{AnnotationSet, TubeAnnotation};
use tubelet_core::geometry::{box_l1, giou};
use tubelet_core::loss::{class_match_cost, LossConfig};
use tubelet_core::matching::{build_cost, match_per_frame, match_tubelet, solve_assignment};
use tubelet_core::model::TubeletSet;

fn matrix(max_n: usize, max_m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_m).prop_flat_map(move |m| {
        (1..=m.min(max_n)).prop_flat_map(move |n| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, m), n))
    })
}

fn int_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6).prop_flat_map(|m| {
        (1..=m).prop_flat_map(move |n| {
            prop::collection::vec(prop::collection::vec((0i32..6).prop_map(f64::from), m), n)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn solver_matches_exhaustive_search(c in matrix(6, 7)) {
        let (map, total) = solve_assignment(&c).unwrap();
        prop_assert!((total - exhaustive_assignment(&c)).abs() < 1e-9);
        let mut seen = std::collections::BTreeSet::new();
        prop_assert!(map.iter().all(|&j| seen.insert(j)));
        let recomputed: f64 = map.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        prop_assert_eq!(recomputed, total);
    }

    #[test]
    fn permuting_rows_and_columns_permutes_the_map(c in matrix(5, 6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (c.len(), c[0].len());
        let mut rp: Vec<usize> = (0..n).collect();
        let mut cp: Vec<usize> = (0..m).collect();
        rp.shuffle(&mut rng);
        cp.shuffle(&mut rng);
        // permuted[i][j] = c[rp[i]][cp[j]]
        let permuted: Vec<Vec<f64>> = rp.iter().map(|&r| cp.iter().map(|&k| c[r][k]).collect()).collect();
        let (map, total) = solve_assignment(&c).unwrap();
        let (pmap, ptotal) = solve_assignment(&permuted).unwrap();
        prop_assert!((total - ptotal).abs() < 1e-9);
        // with continuous costs the optimum is unique, so the maps correspond
        for i in 0..n {
            prop_assert_eq!(cp[pmap[i]], map[rp[i]]);
        }
    }

    #[test]
    fn row_offsets_shift_cost_but_not_the_map(c in int_matrix(), row in 0usize..6, k in 1i32..10) {
        let row = row % c.len();
        let mut shifted = c.clone();
        shifted[row].iter_mut().for_each(|v| *v += f64::from(k));
        let (map, total) = solve_assignment(&c).unwrap();
        let (smap, stotal) = solve_assignment(&shifted).unwrap();
        prop_assert_eq!(smap, map);
        prop_assert_eq!(stotal, total + f64::from(k));
    }

    #[test]
    fn integer_costs_match_exhaustive_exactly(c in int_matrix()) {
        prop_assert_eq!(solve_assignment(&c).unwrap().1, exhaustive_assignment(&c));
    }

    #[test]
    fn per_frame_relaxation_bounds_tubelet_cost(seed in any::<u64>()) {
        let costs = random_cost_tensor(&mut ChaCha8Rng::seed_from_u64(seed));
        let pf = match_per_frame(&costs).unwrap();
        let tb = match_tubelet(&costs).unwrap();
        prop_assert!(costs.assignment_cost(&pf) <= costs.assignment_cost(&tb));
        // each actor keeps one slot across frames under tubelet matching
        let mut slot_of = std::collections::BTreeMap::new();
        for (fc, fa) in costs.frames.iter().zip(&tb.frames) {
            for &(i, j) in &fa.pairs {
                prop_assert_eq!(*slot_of.entry(fc.actors[i]).or_insert(j), j);
            }
        }
    }
}

fn gt_two_actors() -> AnnotationSet {
    AnnotationSet {
        video_id: "m".into(),
        frames_total: 2,
        width: 64,
        height: 64,
        tubes: vec![
            TubeAnnotation {
                actor_id: 4,
                class_ids: vec![vec![0], vec![0]],
                boxes: vec![[0.3, 0.3, 0.2, 0.3]; 2],
                present: vec![true; 2],
            },
            TubeAnnotation {
                actor_id: 9,
                class_ids: vec![vec![1], vec![1, 2]],
                boxes: vec![[0.7, 0.6, 0.3, 0.2]; 2],
                present: vec![true; 2],
            },
        ],
        labelled_mask: vec![true, true],
    }
}

fn crossed_preds() -> TubeletSet {
    // slot 0 sits on actor 9, slot 1 on actor 4, slot 2 in between
    let boxes = [[0.68, 0.62, 0.28, 0.2], [0.31, 0.29, 0.2, 0.33], [0.5, 0.5, 0.1, 0.1]];
    let probs = [[0.1, 0.8, 0.3, 0.2], [0.9, 0.1, 0.1, 0.1], [0.2, 0.2, 0.2, 0.7]];
    let mut out = TubeletSet::zeros(2, 3, 3);
    for t in 0..2 {
        for j in 0..3 {
            out.set_bbox(t, j, tubelet_core::geometry::BBox::from_array(boxes[j]));
            out.probs_mut(t, j).copy_from_slice(&probs[j]);
        }
    }
    out
}

#[test]
fn cost_entries_equal_independent_pair_evaluations() {
    let gt = gt_two_actors();
    let preds = crossed_preds();
    let cfg = LossConfig::default();
    let costs = build_cost(&preds, &gt, &cfg).unwrap();
    for fc in &costs.frames {
        let inst = gt.instances_at(fc.frame);
        for (i, row) in fc.cost.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let b = preds.bbox(fc.frame, j);
                let expect = box_l1(&b, &inst[i].bbox)
                    + (1.0 - giou(&b, &inst[i].bbox))
                    + class_match_cost(&inst[i].target(3), preds.probs(fc.frame, j), &cfg);
                assert_eq!(c, expect);
            }
        }
    }
    let tb = match_tubelet(&costs).unwrap();
    // actor 4 (row 0) goes to slot 1, actor 9 to slot 0
    assert_eq!(tb.frames[0].pairs, vec![(0, 1), (1, 0)]);
}

#[test]
fn reordering_ground_truth_permutes_cost_rows() {
    let gt = gt_two_actors();
    let mut swapped = gt.clone();
    swapped.tubes.reverse();
    let preds = crossed_preds();
    let cfg = LossConfig::default();
    let (a, b) = (build_cost(&preds, &gt, &cfg).unwrap(), build_cost(&preds, &swapped, &cfg).unwrap());
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        let mut ra = fa.cost.clone();
        ra.reverse();
        assert_eq!(ra, fb.cost);
    }
}

#[test]
fn perfect_prediction_costs_almost_nothing() {
    let gt = gt_two_actors();
    let mut preds = TubeletSet::zeros(2, 2, 3);
    for t in 0..2 {
        for (j, inst) in gt.instances_at(t).iter().enumerate() {
            preds.set_bbox(t, j, inst.bbox);
            preds.probs_mut(t, j).copy_from_slice(&inst.target(3));
        }
    }
    let costs = build_cost(&preds, &gt, &LossConfig::default()).unwrap();
    for fc in &costs.frames {
        assert!(fc.cost[0][0] < 1e-6 && fc.cost[1][1] < 1e-6);
    }
}

#[test]
fn unlabelled_annotations_cannot_be_matched() {
    let mut gt = gt_two_actors();
    gt.labelled_mask = vec![false, false];
    assert!(build_cost(&crossed_preds(), &gt, &LossConfig::default()).is_err());
}
