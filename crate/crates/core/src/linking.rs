//! Causal linking of per-clip tubelets into video-length tubes.
//!
//! Clips are visited in temporal order. Every live tube claims the unclaimed
//! tubelet of the next clip with the highest `mean IoU + confidence`, where
//! the IoU is averaged over the frames both cover inside the clip overlap and
//! must reach `iou_min`. Tubes that claim nothing terminate; tubelets nobody
//! claims start new tubes. Overlapping frames hold the average box and class
//! probabilities of every tubelet that covered them.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Tube};
use crate::model::TubeletSet;

/// One query slot of one clip, placed on the video timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTubelet {
    /// `actor_id` holds the slot index; `class_id` the most probable action.
    pub tube: Tube,
    /// Class probabilities (background last) at every frame of `tube`.
    pub probs: Vec<Vec<f64>>,
    /// Mean over frames of the largest action-class probability.
    pub confidence: f64,
}

impl ScoredTubelet {
    /// Slot `slot` of a clip starting at video frame `start`.
    pub fn from_output(out: &TubeletSet, slot: usize, start: usize) -> Self {
        let boxes = (0..out.frames).map(|t| Some(out.bbox(t, slot))).collect();
        let probs: Vec<Vec<f64>> = (0..out.frames).map(|t| out.probs(t, slot).to_vec()).collect();
        let confidence = (0..out.frames).map(|t| out.max_action_prob(t, slot)).sum::<f64>() / out.frames as f64;
        let class_id = argmax_mean(&probs, out.classes);
        Self {
            tube: Tube {
                start,
                boxes,
                actor_id: slot as u64,
                class_id,
            },
            probs,
            confidence,
        }
    }
}

fn argmax_mean(probs: &[Vec<f64>], classes: usize) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes {
        let m = probs.iter().map(|p| p[c]).sum::<f64>();
        if m > best.1 {
            best = (c, m);
        }
    }
    best.0
}

/// Every slot of a clip whose confidence reaches `min_confidence`.
pub fn clip_tubelets(out: &TubeletSet, start: usize, min_confidence: f64) -> Vec<ScoredTubelet> {
    (0..out.slots)
        .map(|j| ScoredTubelet::from_output(out, j, start))
        .filter(|t| t.confidence >= min_confidence)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTube {
    /// Constituents as `(clip index, tubelet index within the clip)`.
    pub members: Vec<(usize, usize)>,
    /// Merged boxes; `actor_id` is the tube's index in the output.
    pub tube: Tube,
    /// Averaged class probabilities at every frame of `tube` (empty where absent).
    pub probs: Vec<Vec<f64>>,
    /// Mean constituent confidence.
    pub score: f64,
    /// Query slot of the first constituent.
    pub slot: usize,
}

impl VideoTube {
    /// Mean probability of `class` over the frames the tube covers.
    pub fn class_score(&self, class: usize) -> f64 {
        let present: Vec<&Vec<f64>> = self.probs.iter().filter(|p| !p.is_empty()).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|p| p[class]).sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Frames shared by consecutive clips.
    pub overlap_frames: usize,
    pub iou_min: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            overlap_frames: 8,
            iou_min: 0.1,
        }
    }
}

struct Building {
    members: Vec<(usize, usize)>,
    slot: usize,
    start: usize,
    box_sum: Vec<[f64; 4]>,
    prob_sum: Vec<Vec<f64>>,
    count: Vec<usize>,
    conf_sum: f64,
}

impl Building {
    fn new(clip: usize, idx: usize, t: &ScoredTubelet) -> Self {
        let mut b = Building {
            members: Vec::new(),
            slot: t.tube.actor_id as usize,
            start: t.tube.start,
            box_sum: Vec::new(),
            prob_sum: Vec::new(),
            count: Vec::new(),
            conf_sum: 0.0,
        };
        b.add(clip, idx, t);
        b
    }

    fn box_at(&self, frame: usize) -> Option<BBox> {
        let k = frame.checked_sub(self.start)?;
        let n = *self.count.get(k)?;
        (n > 0).then(|| {
            let s = self.box_sum[k];
            let n = n as f64;
            BBox::new(s[0] / n, s[1] / n, s[2] / n, s[3] / n)
        })
    }

    fn add(&mut self, clip: usize, idx: usize, t: &ScoredTubelet) {
        self.members.push((clip, idx));
        self.conf_sum += t.confidence;
        for (k, b) in t.tube.boxes.iter().enumerate() {
            let Some(b) = b else { continue };
            let frame = t.tube.start + k;
            let i = frame - self.start;
            if i >= self.count.len() {
                self.box_sum.resize(i + 1, [0.0; 4]);
                self.prob_sum.resize(i + 1, Vec::new());
                self.count.resize(i + 1, 0);
            }
            for (s, v) in self.box_sum[i].iter_mut().zip(b.to_array()) {
                *s += v;
            }
            let p = &t.probs[k];
            if self.prob_sum[i].is_empty() {
                self.prob_sum[i] = vec![0.0; p.len()];
            }
            for (s, v) in self.prob_sum[i].iter_mut().zip(p) {
                *s += v;
            }
            self.count[i] += 1;
        }
    }

    fn finish(self, id: usize) -> VideoTube {
        let boxes = (0..self.count.len()).map(|k| self.box_at(self.start + k)).collect();
        let probs = self
            .prob_sum
            .iter()
            .zip(&self.count)
            .map(|(p, &n)| p.iter().map(|v| v / n.max(1) as f64).collect())
            .collect::<Vec<Vec<f64>>>();
        let classes = probs.iter().find(|p| !p.is_empty()).map_or(0, |p| p.len().saturating_sub(1));
        let class_id = {
            let present: Vec<Vec<f64>> = probs.iter().filter(|p| !p.is_empty()).cloned().collect();
            argmax_mean(&present, classes)
        };
        VideoTube {
            score: self.conf_sum / self.members.len() as f64,
            slot: self.slot,
            members: self.members,
            tube: Tube {
                start: self.start,
                boxes,
                actor_id: id as u64,
                class_id,
            },
            probs,
        }
    }
}

/// Links the tubelets of consecutive clips. `clips[k]` holds the tubelets of
/// clip `k`, all starting at the same frame; clip starts must increase.
pub fn link_tubelets(clips: &[Vec<ScoredTubelet>], cfg: &LinkConfig) -> Result<Vec<VideoTube>> {
    if cfg.overlap_frames == 0 {
        return Err(Error::Config("overlap_frames must be at least 1".into()));
    }
    let mut prev_start: Option<usize> = None;
    for (k, clip) in clips.iter().enumerate() {
        let Some(first) = clip.first() else { continue };
        if clip.iter().any(|t| t.tube.start != first.tube.start) {
            return Err(Error::InvalidInput(format!("clip {k} mixes tubelet start frames")));
        }
        if prev_start.is_some_and(|p| first.tube.start <= p) {
            return Err(Error::InvalidInput(format!("clips out of order at clip {k}")));
        }
        prev_start = Some(first.tube.start);
    }

    let mut done: Vec<Building> = Vec::new();
    let mut live: Vec<Building> = Vec::new();
    for (k, clip) in clips.iter().enumerate() {
        let Some(first) = clip.first() else {
            done.append(&mut live);
            continue;
        };
        let window = first.tube.start..first.tube.start + cfg.overlap_frames;
        let mut claimed = vec![false; clip.len()];
        // stronger tubes choose first; ties keep creation order
        let mut order: Vec<usize> = (0..live.len()).collect();
        order.sort_by(|&a, &b| {
            let sa = live[a].conf_sum / live[a].members.len() as f64;
            let sb = live[b].conf_sum / live[b].members.len() as f64;
            sb.total_cmp(&sa)
        });
        let mut extended = vec![false; live.len()];
        for &ti in &order {
            let mut best: Option<(usize, f64)> = None;
            for (j, cand) in clip.iter().enumerate() {
                if claimed[j] {
                    continue;
                }
                let ious: Vec<f64> = window
                    .clone()
                    .filter_map(|f| Some(iou(&live[ti].box_at(f)?, &cand.tube.box_at(f)?)))
                    .collect();
                if ious.is_empty() {
                    continue;
                }
                let mean = ious.iter().sum::<f64>() / ious.len() as f64;
                if mean < cfg.iou_min {
                    continue;
                }
                let score = mean + cand.confidence;
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((j, score));
                }
            }
            if let Some((j, _)) = best {
                claimed[j] = true;
                extended[ti] = true;
                live[ti].add(k, j, &clip[j]);
            }
        }
        let mut next = Vec::new();
        for (b, ext) in live.into_iter().zip(extended) {
            if ext {
                next.push(b);
            } else {
                done.push(b);
            }
        }
        for (j, t) in clip.iter().enumerate() {
            if !claimed[j] {
                next.push(Building::new(k, j, t));
            }
        }
        live = next;
    }
    done.append(&mut live);
    // report in order of first appearance
    done.sort_by_key(|b| b.members[0]);
    Ok(done.into_iter().enumerate().map(|(i, b)| b.finish(i)).collect())
}

/// Clip start frames covering `frames` with windows of `len` and the given stride;
/// the last window is aligned to the end of the video.
pub fn clip_starts(frames: usize, len: usize, stride: usize) -> Vec<usize> {
    if frames <= len {
        return vec![0];
    }
    let stride = stride.max(1);
    let mut starts: Vec<usize> = (0..=frames - len).step_by(stride).collect();
    if *starts.last().expect("non-empty") != frames - len {
        starts.push(frames - len);
    }
    starts
}

/// A tube or tubelet as written to prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame_start: usize,
    /// Exclusive.
    pub frame_end: usize,
    pub boxes: Vec<Option<[f64; 4]>>,
    pub class_probs: Vec<Option<Vec<f64>>>,
    pub confidence: f64,
    /// Query slot that produced the record.
    #[serde(default)]
    pub slot: usize,
}

impl PredictionRecord {
    pub fn from_video_tube(video_id: &str, t: &VideoTube) -> Self {
        Self {
            video_id: video_id.to_string(),
            frame_start: t.tube.start,
            frame_end: t.tube.end(),
            boxes: t.tube.boxes.iter().map(|b| b.map(BBox::to_array)).collect(),
            class_probs: t
                .probs
                .iter()
                .map(|p| (!p.is_empty()).then(|| p.clone()))
                .collect(),
            confidence: t.score,
            slot: t.slot,
        }
    }

    pub fn to_video_tube(&self, id: usize) -> Result<VideoTube> {
        let n = self.frame_end.checked_sub(self.frame_start).unwrap_or(0);
        if self.boxes.len() != n || self.class_probs.len() != n {
            return Err(Error::Format(format!(
                "{}: record spans {n} frames but has {} boxes and {} probability rows",
                self.video_id,
                self.boxes.len(),
                self.class_probs.len()
            )));
        }
        let probs: Vec<Vec<f64>> = self.class_probs.iter().map(|p| p.clone().unwrap_or_default()).collect();
        let classes = probs.iter().find(|p| !p.is_empty()).map_or(0, |p| p.len().saturating_sub(1));
        let present: Vec<Vec<f64>> = probs.iter().filter(|p| !p.is_empty()).cloned().collect();
        Ok(VideoTube {
            members: Vec::new(),
            tube: Tube::new(
                self.frame_start,
                self.boxes.iter().map(|b| b.map(BBox::from_array)).collect(),
                id as u64,
                argmax_mean(&present, classes),
            )?,
            probs,
            score: self.confidence,
            slot: self.slot,
        })
    }
}

impl PredictionRecord {
    /// A single clip tubelet, before linking.
    pub fn from_tubelet(video_id: &str, t: &ScoredTubelet) -> Self {
        Self {
            video_id: video_id.to_string(),
            frame_start: t.tube.start,
            frame_end: t.tube.end(),
            boxes: t.tube.boxes.iter().map(|b| b.map(BBox::to_array)).collect(),
            class_probs: t.probs.iter().map(|p| Some(p.clone())).collect(),
            confidence: t.confidence,
            slot: t.tube.actor_id as usize,
        }
    }

    pub fn to_tubelet(&self) -> Result<ScoredTubelet> {
        let vt = self.to_video_tube(self.slot)?;
        if vt.probs.iter().zip(&vt.tube.boxes).any(|(p, b)| p.is_empty() != b.is_none()) {
            return Err(Error::Format(format!("{}: boxes and probabilities disagree on presence", self.video_id)));
        }
        Ok(ScoredTubelet {
            tube: vt.tube,
            probs: vt.probs,
            confidence: self.confidence,
        })
    }
}

/// Links per-clip tubelet records into video tubes. Records of one video must
/// come clip by clip in temporal order; videos keep their first-seen order.
pub fn link_records(records: &[PredictionRecord], iou_min: f64) -> Result<Vec<PredictionRecord>> {
    let mut videos: Vec<(&str, Vec<Vec<ScoredTubelet>>)> = Vec::new();
    for r in records {
        let t = r.to_tubelet()?;
        let pos = match videos.iter().position(|(v, _)| *v == r.video_id) {
            Some(p) => p,
            None => {
                videos.push((&r.video_id, Vec::new()));
                videos.len() - 1
            }
        };
        let clips = &mut videos[pos].1;
        match clips.last_mut() {
            Some(last) if last[0].tube.start == t.tube.start => last.push(t),
            _ => clips.push(vec![t]),
        }
    }
    let mut out = Vec::new();
    for (video, clips) in videos {
        let overlap = clips
            .windows(2)
            .map(|w| w[0].iter().map(|t| t.tube.end()).max().unwrap_or(0).saturating_sub(w[1][0].tube.start))
            .min()
            .unwrap_or(1)
            .max(1);
        let tubes = link_tubelets(
            &clips,
            &LinkConfig {
                overlap_frames: overlap,
                iou_min,
            },
        )?;
        out.extend(tubes.iter().map(|t| PredictionRecord::from_video_tube(video, t)));
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
