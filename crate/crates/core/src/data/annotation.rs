use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Tube};

/// Ground truth for one actor. Per-frame vectors all have `frames_total` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeAnnotation {
    pub actor_id: u64,
    /// Action labels per frame; an actor may carry several at once.
    pub class_ids: Vec<Vec<usize>>,
    /// `[cx, cy, w, h]` normalised; ignored where `present` is false.
    pub boxes: Vec<[f64; 4]>,
    pub present: Vec<bool>,
}

/// All ground truth for one video, with the mask of frames carrying supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub video_id: String,
    pub frames_total: usize,
    pub width: usize,
    pub height: usize,
    pub tubes: Vec<TubeAnnotation>,
    pub labelled_mask: Vec<bool>,
}

/// One ground-truth actor at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub actor_id: u64,
    pub bbox: BBox,
    pub classes: Vec<usize>,
}

impl Instance {
    /// Target vector over `classes` action channels plus the background channel.
    pub fn target(&self, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes + 1];
        for &c in &self.classes {
            if c < classes {
                y[c] = 1.0;
            }
        }
        y
    }
}

/// Target for an unmatched slot: background channel on, action channels off.
pub fn background_target(classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes + 1];
    y[classes] = 1.0;
    y
}

impl TubeAnnotation {
    pub fn box_at(&self, t: usize) -> Option<BBox> {
        (*self.present.get(t)?).then(|| BBox::from_array(self.boxes[t]))
    }

    pub fn classes_at(&self, t: usize) -> &[usize] {
        self.class_ids.get(t).map_or(&[], |c| c.as_slice())
    }

    /// Distinct action labels over the frames where the actor is present.
    pub fn labels(&self) -> BTreeSet<usize> {
        (0..self.present.len())
            .filter(|&t| self.present[t])
            .flat_map(|t| self.class_ids[t].iter().copied())
            .collect()
    }

    /// Frames where the actor is present and carries `class`, as a [`Tube`].
    pub fn tube_for_class(&self, class: usize) -> Option<Tube> {
        let boxes: Vec<Option<BBox>> = (0..self.present.len())
            .map(|t| {
                if self.class_ids[t].contains(&class) {
                    self.box_at(t)
                } else {
                    None
                }
            })
            .collect();
        Tube::new(0, boxes, self.actor_id, class).ok()
    }
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames_total;
        if self.labelled_mask.len() != n {
            return Err(Error::InvalidInput(format!(
                "{}: labelled_mask has {} entries, expected {n}",
                self.video_id,
                self.labelled_mask.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for tube in &self.tubes {
            if !ids.insert(tube.actor_id) {
                return Err(Error::InvalidInput(format!(
                    "{}: duplicate actor id {}",
                    self.video_id, tube.actor_id
                )));
            }
            if tube.boxes.len() != n || tube.present.len() != n || tube.class_ids.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{}: actor {} does not cover {n} frames",
                    self.video_id, tube.actor_id
                )));
            }
            for t in 0..n {
                if tube.present[t] && !BBox::from_array(tube.boxes[t]).is_valid() {
                    return Err(Error::InvalidInput(format!(
                        "{}: actor {} has an invalid box at frame {t}",
                        self.video_id, tube.actor_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn labelled_frames(&self) -> Vec<usize> {
        (0..self.frames_total).filter(|&t| self.labelled_mask[t]).collect()
    }

    /// Actors present at frame `t`, in tube order.
    pub fn instances_at(&self, t: usize) -> Vec<Instance> {
        self.tubes
            .iter()
            .filter_map(|tube| {
                tube.box_at(t).map(|bbox| Instance {
                    actor_id: tube.actor_id,
                    bbox,
                    classes: tube.classes_at(t).to_vec(),
                })
            })
            .collect()
    }

    /// Restrict to frames `[start, start + len)`, re-indexed from 0. Actors
    /// absent from the whole window are dropped.
    pub fn window(&self, start: usize, len: usize) -> Result<AnnotationSet> {
        if start + len > self.frames_total {
            return Err(Error::InvalidInput(format!(
                "window [{start}, {}) exceeds {} frames",
                start + len,
                self.frames_total
            )));
        }
        let r = start..start + len;
        let tubes = self
            .tubes
            .iter()
            .map(|t| TubeAnnotation {
                actor_id: t.actor_id,
                class_ids: t.class_ids[r.clone()].to_vec(),
                boxes: t.boxes[r.clone()].to_vec(),
                present: t.present[r.clone()].to_vec(),
            })
            .filter(|t| t.present.iter().any(|&p| p))
            .collect();
        Ok(AnnotationSet {
            video_id: self.video_id.clone(),
            frames_total: len,
            width: self.width,
            height: self.height,
            tubes,
            labelled_mask: self.labelled_mask[r].to_vec(),
        })
    }

    /// Expand every actor into one single-label actor per action it performs.
    /// Used by the query-per-action comparison arm.
    pub fn split_by_action(&self) -> AnnotationSet {
        let mut tubes = Vec::new();
        for tube in &self.tubes {
            for class in tube.labels() {
                let n = tube.present.len();
                let present: Vec<bool> =
                    (0..n).map(|t| tube.present[t] && tube.class_ids[t].contains(&class)).collect();
                if !present.iter().any(|&p| p) {
                    continue;
                }
                tubes.push(TubeAnnotation {
                    actor_id: tube.actor_id * 1024 + class as u64,
                    class_ids: present.iter().map(|&p| if p { vec![class] } else { vec![] }).collect(),
                    boxes: tube.boxes.clone(),
                    present,
                });
            }
        }
        AnnotationSet {
            tubes,
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ann: AnnotationSet = serde_json::from_str(&text)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
