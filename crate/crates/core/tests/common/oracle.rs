//! Brute-force references shared by the property tests and the acceptance suite.
//!
//! Boxes live on an integer grid of `GRID` cells per side, so areas and
//! overlaps are exact cell counts.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use tubelet_core::eval::{FrameDetection, FrameGroundTruth, TubeDetection, TubeGroundTruth};
use tubelet_core::geometry::{BBox, Corners, Tube};

pub const GRID: i64 = 16;

/// Integer corner box `[x0, x1) x [y0, y1)` in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cells {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Cells {
    pub fn to_bbox(self) -> BBox {
        let g = GRID as f64;
        BBox::from_corners(Corners {
            x0: self.x0 as f64 / g,
            y0: self.y0 as f64 / g,
            x1: self.x1 as f64 / g,
            y1: self.y1 as f64 / g,
        })
    }

    pub fn raster(self) -> BTreeSet<(i64, i64)> {
        let mut s = BTreeSet::new();
        for y in self.y0..self.y1 {
            for x in self.x0..self.x1 {
                s.insert((x, y));
            }
        }
        s
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let (a, b) = (rng.random_range(0..=GRID), rng.random_range(0..=GRID));
        let (c, d) = (rng.random_range(0..=GRID), rng.random_range(0..=GRID));
        Cells {
            x0: a.min(b),
            x1: a.max(b),
            y0: c.min(d),
            y1: c.max(d),
        }
    }

    /// Non-degenerate random box.
    pub fn random_solid<R: Rng>(rng: &mut R) -> Self {
        loop {
            let c = Self::random(rng);
            if c.x1 > c.x0 && c.y1 > c.y0 {
                return c;
            }
        }
    }
}

/// Exact rational `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy)]
pub struct Q {
    pub num: i128,
    pub den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Q {
    pub fn new(num: i128, den: i128) -> Self {
        assert!(den != 0);
        let g = gcd(num, den).max(1) * den.signum();
        Q { num: num / g, den: den / g }
    }
    pub fn zero() -> Self {
        Q { num: 0, den: 1 }
    }
    pub fn add(self, o: Q) -> Q {
        Q::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
    pub fn mul(self, o: Q) -> Q {
        Q::new(self.num * o.num, self.den * o.den)
    }
    pub fn gt(self, o: Q) -> bool {
        self.num * o.den > o.num * self.den
    }
    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Spatio-temporal IoU by counting voxels; `None` frames are absent.
pub fn raster_tube_iou(a: &[Option<Cells>], b: &[Option<Cells>]) -> Q {
    let (mut inter, mut union) = (0i128, 0i128);
    for t in 0..a.len().max(b.len()) {
        let ra = a.get(t).copied().flatten().map(Cells::raster).unwrap_or_default();
        let rb = b.get(t).copied().flatten().map(Cells::raster).unwrap_or_default();
        inter += ra.intersection(&rb).count() as i128;
        union += ra.union(&rb).count() as i128;
    }
    if union == 0 {
        Q::zero()
    } else {
        Q::new(inter, union)
    }
}

pub fn tube_of(cells: &[Option<Cells>], actor_id: u64, class_id: usize) -> Tube {
    Tube::new(0, cells.iter().map(|c| c.map(Cells::to_bbox)).collect(), actor_id, class_id).unwrap()
}

/// Minimum total cost over every injective row-to-column map.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let m = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; m], 0.0, &mut best);
    if cost.is_empty() {
        0.0
    } else {
        best
    }
}

/// A small detection problem on the cell grid.
#[derive(Debug, Clone)]
pub struct Instance {
    pub classes: usize,
    /// `(video, frame, class, score, boxes per frame)`; frame detections use one box.
    pub dets: Vec<(usize, usize, usize, f64, Vec<Option<Cells>>)>,
    pub gts: Vec<(usize, usize, usize, Vec<Option<Cells>>)>,
}

/// Random instance with at most 6 detections, 4 ground truths and 3 classes.
/// Scores come from a short list so ties occur. `frames` boxes per record
/// (1 for frame-level problems).
pub fn random_instance<R: Rng>(rng: &mut R, frames: usize) -> Instance {
    let classes = rng.random_range(1..=3);
    let cells = |rng: &mut R| -> Vec<Option<Cells>> {
        loop {
            let v: Vec<Option<Cells>> = (0..frames)
                .map(|_| rng.random_bool(0.8).then(|| Cells::random_solid(rng)))
                .collect();
            if v.iter().any(Option::is_some) {
                return v;
            }
        }
    };
    let n_gt = rng.random_range(0..=4);
    let mut gts = Vec::new();
    for _ in 0..n_gt {
        gts.push((rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..classes), cells(rng)));
    }
    let n_det = rng.random_range(0..=6);
    let mut dets = Vec::new();
    for _ in 0..n_det {
        let score = [0.1, 0.3, 0.5, 0.5, 0.7, 0.9][rng.random_range(0..6)];
        // half the detections perturb a ground truth so that hits are common
        let boxes = if !gts.is_empty() && rng.random_bool(0.5) {
            let g = &gts[rng.random_range(0..gts.len())];
            let (v, f, c) = (g.0, g.1, g.2);
            let b: Vec<Option<Cells>> = g
                .3
                .iter()
                .map(|b| {
                    b.map(|b| {
                        let j = |v: i64, rng: &mut R| (v + rng.random_range(-1..=1)).clamp(0, GRID);
                        let (x0, x1) = (j(b.x0, rng), j(b.x1, rng));
                        let (y0, y1) = (j(b.y0, rng), j(b.y1, rng));
                        Cells {
                            x0: x0.min(x1),
                            x1: x0.max(x1).max(x0.min(x1) + 1),
                            y0: y0.min(y1),
                            y1: y0.max(y1).max(y0.min(y1) + 1),
                        }
                    })
                })
                .collect();
            dets.push((v, f, c, score, b));
            continue;
        } else {
            cells(rng)
        };
        dets.push((rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..classes), score, boxes));
    }
    Instance { classes, dets, gts }
}

impl Instance {
    pub fn frame_records(&self) -> (Vec<FrameDetection>, Vec<FrameGroundTruth>) {
        let d = self
            .dets
            .iter()
            .map(|(v, f, c, s, b)| FrameDetection {
                video_id: format!("v{v}"),
                frame: *f,
                class_id: *c,
                score: *s,
                bbox: b[0].expect("frame boxes are present").to_bbox(),
            })
            .collect();
        let g = self
            .gts
            .iter()
            .map(|(v, f, c, b)| FrameGroundTruth {
                video_id: format!("v{v}"),
                frame: *f,
                class_id: *c,
                bbox: b[0].expect("frame boxes are present").to_bbox(),
            })
            .collect();
        (d, g)
    }

    pub fn tube_records(&self) -> (Vec<TubeDetection>, Vec<TubeGroundTruth>) {
        let d = self
            .dets
            .iter()
            .enumerate()
            .map(|(i, (v, _, c, s, b))| TubeDetection {
                video_id: format!("v{v}"),
                class_id: *c,
                score: *s,
                tube: tube_of(b, i as u64, *c),
            })
            .collect();
        let g = self
            .gts
            .iter()
            .enumerate()
            .map(|(i, (v, _, c, b))| TubeGroundTruth {
                video_id: format!("v{v}"),
                class_id: *c,
                tube: tube_of(b, i as u64, *c),
            })
            .collect();
        (d, g)
    }

    /// Reference AP per class (`None` without ground truth). Frame problems
    /// group by (video, frame); tube problems by video only.
    pub fn reference_ap(&self, thresh: f64, tubes: bool) -> Vec<Option<Q>> {
        let same_group = |dv: usize, df: usize, gv: usize, gf: usize| dv == gv && (tubes || df == gf);
        (0..self.classes)
            .map(|c| {
                let gts: Vec<_> = self.gts.iter().filter(|g| g.2 == c).collect();
                if gts.is_empty() {
                    return None;
                }
                let mut dets: Vec<_> = self.dets.iter().filter(|d| d.2 == c).collect();
                // stable: equal scores keep record order
                dets.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());
                let mut claimed = vec![false; gts.len()];
                let mut hits = Vec::new();
                for d in dets {
                    let mut best: Option<(usize, Q)> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        if claimed[gi] || !same_group(d.0, d.1, g.0, g.1) {
                            continue;
                        }
                        let o = raster_tube_iou(&d.4, &g.3);
                        if o.to_f64() < thresh {
                            continue;
                        }
                        if best.is_none_or(|(_, bo)| o.gt(bo)) {
                            best = Some((gi, o));
                        }
                    }
                    if let Some((gi, _)) = best {
                        claimed[gi] = true;
                    }
                    hits.push(best.is_some());
                }
                // every recall step weighted by the best precision at that rank or later
                let npos = gts.len() as i128;
                let prec: Vec<Q> = hits
                    .iter()
                    .scan(0i128, |tp, &h| {
                        *tp += h as i128;
                        Some(*tp)
                    })
                    .enumerate()
                    .map(|(k, tp)| Q::new(tp, k as i128 + 1))
                    .collect();
                let mut ap = Q::zero();
                for k in (0..hits.len()).filter(|&k| hits[k]) {
                    let env = prec[k..].iter().copied().fold(Q::zero(), |m, p| if p.gt(m) { p } else { m });
                    ap = ap.add(env.mul(Q::new(1, npos)));
                }
                Some(ap)
            })
            .collect()
    }
}

/// Random labelled-frame costs: up to 4 frames, each showing a random subset
/// of up to `slots` actors, integer costs so every sum is exact.
pub fn random_cost_tensor<R: Rng>(rng: &mut R) -> tubelet_core::matching::CostTensor {
    use tubelet_core::matching::{CostTensor, FrameCost};
    let slots = rng.random_range(1..=6);
    let pool = rng.random_range(1..=slots);
    let frames = (0..rng.random_range(1..=4))
        .map(|t| {
            let actors: Vec<u64> = (0..pool as u64).filter(|_| rng.random_bool(0.7)).collect();
            let cost = actors
                .iter()
                .map(|_| (0..slots).map(|_| rng.random_range(0..20) as f64).collect())
                .collect();
            FrameCost { frame: 2 * t, actors, cost }
        })
        .collect();
    CostTensor { slots, frames }
}
