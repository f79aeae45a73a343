//! Frame AP, Video AP and COCO-style size buckets.
//!
//! Every metric follows one protocol: per class, detections are sorted by
//! score (ties keep input order), each one claims the best-overlapping
//! unclaimed ground truth of the same frame (or video) at or above the IoU
//! threshold, and the precision-recall curve is integrated over all points
//! under its monotone envelope.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::AnnotationSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, tube_iou_3d, BBox, Tube};
use crate::linking::VideoTube;

/// One scored box for one class at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub video_id: String,
    pub frame: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGroundTruth {
    pub video_id: String,
    pub frame: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeDetection {
    pub video_id: String,
    pub class_id: usize,
    pub score: f64,
    pub tube: Tube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeGroundTruth {
    pub video_id: String,
    pub class_id: usize,
    pub tube: Tube,
}

/// Pixel-area ranges of the small, medium and large buckets, half-open.
pub const SIZE_BUCKETS: [(f64, f64); 3] = [(0.0, 32.0 * 32.0), (32.0 * 32.0, 96.0 * 96.0), (96.0 * 96.0, f64::INFINITY)];
pub const BUCKET_NAMES: [&str; 3] = ["small", "medium", "large"];

/// Video AP thresholds of the 0.5:0.95 range.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes with ground truth.
    pub mean: Option<f64>,
}

impl ClassAp {
    fn from_per_class(per_class: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self { per_class, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub threshold: f64,
    pub ap: ClassAp,
    /// Small, medium, large; present when size buckets were requested.
    pub buckets: Option<[ClassAp; 3]>,
}

/// Item of one class as seen by the matcher.
struct Scored {
    score: f64,
    group: usize,
    /// Outside the evaluated size range (only consulted for unmatched detections).
    ignore: bool,
}

/// Greedy matching plus all-point AP for one class. `overlap(d, g)` gives the
/// IoU of detection `d` with ground truth `g`; both must share a group.
fn class_ap(dets: &[Scored], gts: &[Scored], thresh: f64, overlap: impl Fn(usize, usize) -> Result<f64>) -> Result<Option<f64>> {
    let npos = gts.iter().filter(|g| !g.ignore).count();
    if npos == 0 {
        return Ok(None);
    }
    let mut by_group: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_group.entry(g.group).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for d in order {
        // unignored ground truth first, then ignored; best IoU within each
        let mut best: Option<(usize, bool, f64)> = None;
        for &g in by_group.get(&dets[d].group).map_or(&[][..], Vec::as_slice) {
            if claimed[g] {
                continue;
            }
            let o = overlap(d, g)?;
            if o < thresh {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, ign, bo)) => (ign && !gts[g].ignore) || (ign == gts[g].ignore && o > bo),
            };
            if better {
                best = Some((g, gts[g].ignore, o));
            }
        }
        match best {
            Some((g, ign, _)) => {
                claimed[g] = true;
                if !ign {
                    hits.push(true);
                }
            }
            None => {
                if !dets[d].ignore {
                    hits.push(false);
                }
            }
        }
    }
    Ok(Some(average_precision(&hits, npos)))
}

/// All-point interpolated AP of a ranked hit list against `npos` positives.
pub fn average_precision(hits: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / npos as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for k in 0..hits.len() {
        if rec[k] > last {
            ap += (rec[k] - last) * prec[k];
            last = rec[k];
        }
    }
    ap
}

fn check_class(class_id: usize, classes: usize) -> Result<()> {
    if class_id >= classes {
        return Err(Error::InvalidInput(format!("class {class_id} outside 0..{classes}")));
    }
    Ok(())
}

fn check_score(score: f64) -> Result<()> {
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("detection score {score}")));
    }
    Ok(())
}

/// Frame AP at `iou_thresh`. With `resolution` (video id to `(width, height)`)
/// the small/medium/large buckets are evaluated as well.
pub fn frame_ap(
    preds: &[FrameDetection],
    gt: &[FrameGroundTruth],
    classes: usize,
    iou_thresh: f64,
    resolution: Option<&BTreeMap<String, (usize, usize)>>,
) -> Result<ApReport> {
    for p in preds {
        check_class(p.class_id, classes)?;
        check_score(p.score)?;
    }
    for g in gt {
        check_class(g.class_id, classes)?;
    }
    let mut groups: HashMap<(&str, usize), usize> = HashMap::new();
    let keys = preds.iter().map(|p| (p.video_id.as_str(), p.frame)).chain(gt.iter().map(|g| (g.video_id.as_str(), g.frame)));
    let ids: Vec<usize> = keys
        .map(|k| {
            let n = groups.len();
            *groups.entry(k).or_insert(n)
        })
        .collect();
    let (det_groups, gt_groups) = ids.split_at(preds.len());

    let area_px = |video: &str, b: &BBox| -> Result<f64> {
        let res = resolution.expect("only called with buckets");
        let &(w, h) = res
            .get(video)
            .ok_or_else(|| Error::InvalidInput(format!("no resolution for video {video:?}")))?;
        Ok(b.area() * (w * h) as f64)
    };

    let run = |range: Option<(f64, f64)>| -> Result<ClassAp> {
        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut d_idx = Vec::new();
            let mut dets = Vec::new();
            for (i, p) in preds.iter().enumerate().filter(|(_, p)| p.class_id == c) {
                let ignore = match range {
                    Some((lo, hi)) => {
                        let a = area_px(&p.video_id, &p.bbox)?;
                        !(lo..hi).contains(&a)
                    }
                    None => false,
                };
                d_idx.push(i);
                dets.push(Scored {
                    score: p.score,
                    group: det_groups[i],
                    ignore,
                });
            }
            let mut g_idx = Vec::new();
            let mut gts = Vec::new();
            for (i, g) in gt.iter().enumerate().filter(|(_, g)| g.class_id == c) {
                let ignore = match range {
                    Some((lo, hi)) => {
                        let a = area_px(&g.video_id, &g.bbox)?;
                        !(lo..hi).contains(&a)
                    }
                    None => false,
                };
                g_idx.push(i);
                gts.push(Scored {
                    score: 0.0,
                    group: gt_groups[i],
                    ignore,
                });
            }
            per_class.push(class_ap(&dets, &gts, iou_thresh, |d, g| {
                Ok(iou(&preds[d_idx[d]].bbox, &gt[g_idx[g]].bbox))
            })?);
        }
        Ok(ClassAp::from_per_class(per_class))
    };

    let ap = run(None)?;
    let buckets = match resolution {
        Some(_) => Some([run(Some(SIZE_BUCKETS[0]))?, run(Some(SIZE_BUCKETS[1]))?, run(Some(SIZE_BUCKETS[2]))?]),
        None => None,
    };
    Ok(ApReport {
        threshold: iou_thresh,
        ap,
        buckets,
    })
}

/// Video AP at each threshold, matching tubes by spatio-temporal IoU within a video.
pub fn video_ap(preds: &[TubeDetection], gt: &[TubeGroundTruth], classes: usize, thresholds: &[f64]) -> Result<Vec<ApReport>> {
    for p in preds {
        check_class(p.class_id, classes)?;
        check_score(p.score)?;
    }
    for g in gt {
        check_class(g.class_id, classes)?;
    }
    let mut videos: HashMap<&str, usize> = HashMap::new();
    for v in preds.iter().map(|p| p.video_id.as_str()).chain(gt.iter().map(|g| g.video_id.as_str())) {
        let n = videos.len();
        videos.entry(v).or_insert(n);
    }
    let mut out = Vec::with_capacity(thresholds.len());
    // overlaps do not depend on the threshold
    let mut cache: Vec<HashMap<(usize, usize), f64>> = vec![HashMap::new(); classes];
    for &thresh in thresholds {
        let mut per_class = Vec::with_capacity(classes);
        for (c, cache) in cache.iter_mut().enumerate() {
            let d_idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == c).collect();
            let g_idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].class_id == c).collect();
            let dets: Vec<Scored> = d_idx
                .iter()
                .map(|&i| Scored {
                    score: preds[i].score,
                    group: videos[preds[i].video_id.as_str()],
                    ignore: false,
                })
                .collect();
            let gts: Vec<Scored> = g_idx
                .iter()
                .map(|&i| Scored {
                    score: 0.0,
                    group: videos[gt[i].video_id.as_str()],
                    ignore: false,
                })
                .collect();
            let cache = std::cell::RefCell::new(cache);
            per_class.push(class_ap(&dets, &gts, thresh, |d, g| {
                let key = (d_idx[d], g_idx[g]);
                if let Some(&v) = cache.borrow().get(&key) {
                    return Ok(v);
                }
                let v = tube_iou_3d(&preds[key.0].tube, &gt[key.1].tube)?;
                cache.borrow_mut().insert(key, v);
                Ok(v)
            })?);
        }
        out.push(ApReport {
            threshold: thresh,
            ap: ClassAp::from_per_class(per_class),
            buckets: None,
        });
    }
    Ok(out)
}

/// Video AP at 0.2, 0.5 and averaged over 0.5:0.95.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoApSummary {
    pub at_20: ClassAp,
    pub at_50: ClassAp,
    pub at_50_95: ClassAp,
}

pub fn video_ap_summary(preds: &[TubeDetection], gt: &[TubeGroundTruth], classes: usize) -> Result<VideoApSummary> {
    let mut th = vec![0.2];
    th.extend(coco_thresholds());
    let reports = video_ap(preds, gt, classes, &th)?;
    let range = &reports[1..];
    let per_class = (0..classes)
        .map(|c| {
            let v: Option<Vec<f64>> = range.iter().map(|r| r.ap.per_class[c]).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(VideoApSummary {
        at_20: reports[0].ap.clone(),
        at_50: reports[1].ap.clone(),
        at_50_95: ClassAp::from_per_class(per_class),
    })
}

/// Per-frame ground truth on the labelled frames of `ann`, one record per label.
pub fn frame_ground_truth(ann: &AnnotationSet) -> Vec<FrameGroundTruth> {
    let mut out = Vec::new();
    for t in ann.labelled_frames() {
        for inst in ann.instances_at(t) {
            for &c in &inst.classes {
                out.push(FrameGroundTruth {
                    video_id: ann.video_id.clone(),
                    frame: t,
                    class_id: c,
                    bbox: inst.bbox,
                });
            }
        }
    }
    out
}

/// One ground-truth tube per actor and action it performs, over every frame
/// where it performs that action.
pub fn tube_ground_truth(ann: &AnnotationSet) -> Vec<TubeGroundTruth> {
    let mut out = Vec::new();
    for tube in &ann.tubes {
        for c in tube.labels() {
            if let Some(t) = tube.tube_for_class(c) {
                out.push(TubeGroundTruth {
                    video_id: ann.video_id.clone(),
                    class_id: c,
                    tube: t,
                });
            }
        }
    }
    out
}

/// Per-frame, per-class detections from linked tubes, restricted to `frames`.
pub fn frame_detections(video_id: &str, tubes: &[VideoTube], frames: &[usize]) -> Vec<FrameDetection> {
    let mut out = Vec::new();
    for &f in frames {
        for tube in tubes {
            let Some(b) = tube.tube.box_at(f) else { continue };
            let p = &tube.probs[f - tube.tube.start];
            let classes = p.len().saturating_sub(1);
            for (c, &score) in p[..classes].iter().enumerate() {
                out.push(FrameDetection {
                    video_id: video_id.to_string(),
                    frame: f,
                    class_id: c,
                    score,
                    bbox: b,
                });
            }
        }
    }
    out
}

/// One detection per tube and class, scored by the tube's mean class probability.
pub fn tube_detections(video_id: &str, tubes: &[VideoTube], classes: usize) -> Vec<TubeDetection> {
    let mut out = Vec::new();
    for tube in tubes {
        for c in 0..classes {
            out.push(TubeDetection {
                video_id: video_id.to_string(),
                class_id: c,
                score: tube.class_score(c),
                tube: Tube {
                    class_id: c,
                    ..tube.tube.clone()
                },
            });
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// `class_id,ap,ap_small,ap_medium,ap_large`, then a `mean` row. Empty cells
/// mark classes without ground truth.
pub fn write_frame_csv<W: Write>(report: &ApReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["class_id", "ap", "ap_small", "ap_medium", "ap_large"])
        .map_err(csv_err)?;
    let bucket = |k: usize, c: Option<usize>| -> String {
        report.buckets.as_ref().map_or_else(String::new, |b| match c {
            Some(c) => cell(b[k].per_class[c]),
            None => cell(b[k].mean),
        })
    };
    for c in 0..report.ap.per_class.len() {
        wr.write_record([c.to_string(), cell(report.ap.per_class[c]), bucket(0, Some(c)), bucket(1, Some(c)), bucket(2, Some(c))])
            .map_err(csv_err)?;
    }
    wr.write_record(["mean".to_string(), cell(report.ap.mean), bucket(0, None), bucket(1, None), bucket(2, None)])
        .map_err(csv_err)?;
    wr.flush()?;
    Ok(())
}

/// `class_id,vap20,vap50,vap50_95`, then a `mean` row.
pub fn write_video_csv<W: Write>(s: &VideoApSummary, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["class_id", "vap20", "vap50", "vap50_95"]).map_err(csv_err)?;
    for c in 0..s.at_20.per_class.len() {
        wr.write_record([
            c.to_string(),
            cell(s.at_20.per_class[c]),
            cell(s.at_50.per_class[c]),
            cell(s.at_50_95.per_class[c]),
        ])
        .map_err(csv_err)?;
    }
    wr.write_record(["mean".to_string(), cell(s.at_20.mean), cell(s.at_50.mean), cell(s.at_50_95.mean)])
        .map_err(csv_err)?;
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
