use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Per-frame boxes and class probabilities for every query slot of a clip.
///
/// `boxes` is `[frames, slots, 4]` in center form; `probs` is
/// `[frames, slots, classes + 1]` with the background channel last.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeletSet {
    pub frames: usize,
    pub slots: usize,
    pub classes: usize,
    pub boxes: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TubeletSet {
    pub fn new(frames: usize, slots: usize, classes: usize, boxes: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if boxes.len() != frames * slots * 4 || probs.len() != frames * slots * (classes + 1) {
            return Err(Error::Shape(format!(
                "tubelet set [{frames}, {slots}] with {classes} classes got {} box and {} prob values",
                boxes.len(),
                probs.len()
            )));
        }
        Ok(Self {
            frames,
            slots,
            classes,
            boxes,
            probs,
        })
    }

    pub fn zeros(frames: usize, slots: usize, classes: usize) -> Self {
        Self {
            frames,
            slots,
            classes,
            boxes: vec![0.0; frames * slots * 4],
            probs: vec![0.0; frames * slots * (classes + 1)],
        }
    }

    pub fn channels(&self) -> usize {
        self.classes + 1
    }

    pub fn bbox(&self, t: usize, j: usize) -> BBox {
        let o = (t * self.slots + j) * 4;
        BBox::new(self.boxes[o], self.boxes[o + 1], self.boxes[o + 2], self.boxes[o + 3])
    }

    pub fn set_bbox(&mut self, t: usize, j: usize, b: BBox) {
        let o = (t * self.slots + j) * 4;
        self.boxes[o..o + 4].copy_from_slice(&b.to_array());
    }

    pub fn probs(&self, t: usize, j: usize) -> &[f64] {
        let c = self.channels();
        let o = (t * self.slots + j) * c;
        &self.probs[o..o + c]
    }

    pub fn probs_mut(&mut self, t: usize, j: usize) -> &mut [f64] {
        let c = self.channels();
        let o = (t * self.slots + j) * c;
        &mut self.probs[o..o + c]
    }

    /// Largest action-class probability (background excluded).
    pub fn max_action_prob(&self, t: usize, j: usize) -> f64 {
        self.probs(t, j)[..self.classes].iter().copied().fold(0.0, f64::max)
    }
}
