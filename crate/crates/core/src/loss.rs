//! Set losses over matched predictions: box L1, GIoU and focal classification.
//!
//! The frame loss sums the three terms without weights over matched pairs, and
//! adds the classification term against the background target for every
//! unmatched slot. The clip loss averages frame losses over labelled frames.

use serde::{Deserialize, Serialize};

use crate::data::{background_target, AnnotationSet};
use crate::error::{Error, Result};
use crate::geometry::{box_l1, box_l1_grad, giou_loss_grad};
use crate::matching::{build_cost, match_costs, Assignment, FrameAssignment, MatchingMode};
use crate::model::TubeletSet;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Where the focal modulating factors sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FocalForm {
    /// `(1-p)^γ` on the positive term, `p^γ` on the negative term.
    #[default]
    Standard,
    /// Modulators swapped: `p^γ` on the positive term, `(1-p)^γ` on the negative.
    Swapped,
}

/// Class term used inside the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassCost {
    /// The classification loss evaluated at the ground-truth target.
    #[default]
    Focal,
    /// Negative mean probability of the ground-truth classes.
    NegProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub use_focal: bool,
    pub use_aux: bool,
    pub focal_form: FocalForm,
    pub class_cost: ClassCost,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            gamma: 2.0,
            use_focal: true,
            use_aux: false,
            focal_form: FocalForm::Standard,
            class_cost: ClassCost::Focal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("focal alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        if self.use_aux {
            return Err(Error::Config("auxiliary per-layer losses are not supported".into()));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c == p)
}

fn channel_loss(y: f64, p: f64, cfg: &LossConfig) -> (f64, f64) {
    let (p, inside) = clamp_prob(p);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let (value, grad) = if !cfg.use_focal {
        (-y * lp - (1.0 - y) * lq, -y / p + (1.0 - y) / (1.0 - p))
    } else {
        let (a, g) = (cfg.alpha, cfg.gamma);
        // modulator m_pos multiplies -log p, m_neg multiplies -log(1-p)
        let (m_pos, dm_pos, m_neg, dm_neg) = match cfg.focal_form {
            FocalForm::Standard => (
                (1.0 - p).powf(g),
                -g * (1.0 - p).powf(g - 1.0),
                p.powf(g),
                g * p.powf(g - 1.0),
            ),
            FocalForm::Swapped => (
                p.powf(g),
                g * p.powf(g - 1.0),
                (1.0 - p).powf(g),
                -g * (1.0 - p).powf(g - 1.0),
            ),
        };
        let (dm_pos, dm_neg) = if g == 0.0 { (0.0, 0.0) } else { (dm_pos, dm_neg) };
        let value = -a * y * m_pos * lp - (1.0 - a) * (1.0 - y) * m_neg * lq;
        let grad = -a * y * (dm_pos * lp + m_pos / p) - (1.0 - a) * (1.0 - y) * (dm_neg * lq - m_neg / (1.0 - p));
        (value, grad)
    };
    (value, if inside { grad } else { 0.0 })
}

/// Classification loss summed over all channels (focal, or plain sigmoid
/// cross-entropy when `use_focal` is off).
pub fn focal_class_loss(target: &[f64], pred: &[f64], cfg: &LossConfig) -> f64 {
    target.iter().zip(pred).map(|(&y, &p)| channel_loss(y, p, cfg).0).sum()
}

/// Gradient of [`focal_class_loss`] with respect to the probabilities.
pub fn focal_class_grad(target: &[f64], pred: &[f64], cfg: &LossConfig) -> Vec<f64> {
    target.iter().zip(pred).map(|(&y, &p)| channel_loss(y, p, cfg).1).collect()
}

/// Class term of the matching cost for one (target, prediction) pair.
pub fn class_match_cost(target: &[f64], pred: &[f64], cfg: &LossConfig) -> f64 {
    match cfg.class_cost {
        ClassCost::Focal => focal_class_loss(target, pred, cfg),
        ClassCost::NegProb => {
            let classes = target.len() - 1;
            let pos: Vec<usize> = (0..classes).filter(|&c| target[c] > 0.5).collect();
            if pos.is_empty() {
                0.0
            } else {
                -pos.iter().map(|&c| pred[c]).sum::<f64>() / pos.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameLoss {
    pub frame: usize,
    pub l_box: f64,
    pub l_iou: f64,
    pub l_class: f64,
}

impl FrameLoss {
    pub fn total(&self) -> f64 {
        self.l_box + self.l_iou + self.l_class
    }
}

/// Loss terms per labelled frame, their mean, and the matching that produced them.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub frames: Vec<FrameLoss>,
    pub l_box: f64,
    pub l_iou: f64,
    pub l_class: f64,
    pub total: f64,
    pub assignment: Assignment,
    pub config: LossConfig,
    gt: AnnotationSet,
}

/// Gradients of the total loss with respect to the boxes and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub boxes: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Loss at frame `t` for a given assignment there.
pub fn frame_loss(
    preds: &TubeletSet,
    gt: &AnnotationSet,
    assignment: &FrameAssignment,
    cfg: &LossConfig,
) -> Result<FrameLoss> {
    frame_terms(preds, gt, assignment, cfg, None)
}

fn frame_terms(
    preds: &TubeletSet,
    gt: &AnnotationSet,
    assignment: &FrameAssignment,
    cfg: &LossConfig,
    mut grads: Option<(&mut LossGradients, f64)>,
) -> Result<FrameLoss> {
    let t = assignment.frame;
    if t >= preds.frames {
        return Err(Error::InvalidInput(format!("frame {t} outside predictions")));
    }
    let instances = gt.instances_at(t);
    let mut out = FrameLoss {
        frame: t,
        ..Default::default()
    };
    let mut matched = vec![None; preds.slots];
    for &(i, j) in &assignment.pairs {
        if i >= instances.len() {
            return Err(Error::InvalidInput(format!(
                "assignment references missing ground truth {i} at frame {t}"
            )));
        }
        if j >= preds.slots || matched[j].is_some() {
            return Err(Error::InvalidInput(format!("invalid query slot {j} at frame {t}")));
        }
        matched[j] = Some(i);
    }
    let background = background_target(preds.classes);
    let channels = preds.channels();
    for (j, m) in matched.iter().enumerate() {
        let probs = preds.probs(t, j);
        let target = match m {
            Some(i) => instances[*i].target(preds.classes),
            None => background.clone(),
        };
        out.l_class += focal_class_loss(&target, probs, cfg);
        if let Some((g, scale)) = grads.as_mut() {
            let gp = focal_class_grad(&target, probs, cfg);
            let o = (t * preds.slots + j) * channels;
            for (acc, v) in g.probs[o..o + channels].iter_mut().zip(gp) {
                *acc += *scale * v;
            }
        }
        if let Some(i) = m {
            let b = preds.bbox(t, j);
            let target_box = instances[*i].bbox;
            out.l_box += box_l1(&b, &target_box);
            let (l_iou, d_iou) = giou_loss_grad(&b, &target_box);
            out.l_iou += l_iou;
            if let Some((g, scale)) = grads.as_mut() {
                let d_l1 = box_l1_grad(&b, &target_box);
                let o = (t * preds.slots + j) * 4;
                for k in 0..4 {
                    g.boxes[o + k] += *scale * (d_l1[k] + d_iou[k]);
                }
            }
        }
    }
    Ok(out)
}

/// Match in the requested mode, then average frame losses over the labelled frames.
pub fn total_loss(
    preds: &TubeletSet,
    gt: &AnnotationSet,
    mode: MatchingMode,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let costs = build_cost(preds, gt, cfg)?;
    let assignment = match_costs(&costs, mode)?;
    loss_for_assignment(preds, gt, assignment, cfg)
}

/// Loss under a fixed assignment (the matching step is skipped).
pub fn loss_for_assignment(
    preds: &TubeletSet,
    gt: &AnnotationSet,
    assignment: Assignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if assignment.frames.is_empty() {
        return Err(Error::InvalidInput("empty labelled set".into()));
    }
    let frames = assignment
        .frames
        .iter()
        .map(|fa| frame_loss(preds, gt, fa, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let l_box = frames.iter().map(|f| f.l_box).sum::<f64>() / n;
    let l_iou = frames.iter().map(|f| f.l_iou).sum::<f64>() / n;
    let l_class = frames.iter().map(|f| f.l_class).sum::<f64>() / n;
    Ok(LossBreakdown {
        frames,
        l_box,
        l_iou,
        l_class,
        total: l_box + l_iou + l_class,
        assignment,
        config: cfg.clone(),
        gt: gt.clone(),
    })
}

/// Analytic gradients of `breakdown.total`; the assignment is held fixed.
pub fn loss_backward(breakdown: &LossBreakdown, preds: &TubeletSet) -> Result<LossGradients> {
    let mut grads = LossGradients {
        boxes: vec![0.0; preds.boxes.len()],
        probs: vec![0.0; preds.probs.len()],
    };
    let scale = 1.0 / breakdown.assignment.frames.len() as f64;
    for fa in &breakdown.assignment.frames {
        frame_terms(preds, &breakdown.gt, fa, &breakdown.config, Some((&mut grads, scale)))?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TubeAnnotation;
    use crate::geometry::giou;
    use approx::assert_relative_eq;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn focal_reference_value() {
        let v = focal_class_loss(&[1.0], &[0.5], &cfg());
        assert_relative_eq!(v, 0.3 * 0.25 * 2f64.ln(), epsilon = 1e-12);
        let swapped = LossConfig {
            focal_form: FocalForm::Swapped,
            ..cfg()
        };
        assert_relative_eq!(focal_class_loss(&[1.0], &[0.5], &swapped), v, epsilon = 1e-15);
        assert!(focal_class_loss(&[1.0], &[1.0 - 1e-9], &cfg()) < 1e-12);
    }

    #[test]
    fn gamma_zero_is_scaled_bce() {
        let c = LossConfig {
            alpha: 0.5,
            gamma: 0.0,
            ..cfg()
        };
        for (y, p) in [(1.0, 0.3), (0.0, 0.8), (1.0, 0.95)] {
            let bce: f64 = -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p));
            assert_relative_eq!(focal_class_loss(&[y], &[p], &c), 0.5 * bce, epsilon = 1e-12);
        }
        let plain = LossConfig {
            use_focal: false,
            ..cfg()
        };
        let bce: f64 = -(0.3f64.ln()) - (1.0 - 0.6f64).ln();
        assert_relative_eq!(focal_class_loss(&[1.0, 0.0], &[0.3, 0.6], &plain), bce, epsilon = 1e-12);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        for form in [FocalForm::Standard, FocalForm::Swapped] {
            for use_focal in [true, false] {
                let c = LossConfig {
                    focal_form: form,
                    use_focal,
                    ..cfg()
                };
                let y = [1.0, 0.0, 0.0, 1.0];
                let p = [0.2, 0.7, 0.01, 0.93];
                let g = focal_class_grad(&y, &p, &c);
                for k in 0..4 {
                    let h = 1e-7;
                    let mut pp = p;
                    let mut pm = p;
                    pp[k] += h;
                    pm[k] -= h;
                    let fd = (focal_class_loss(&y, &pp, &c) - focal_class_loss(&y, &pm, &c)) / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{form:?} k={k}: {fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { alpha: 1.5, ..cfg() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { use_aux: true, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    fn one_frame_gt(boxes: &[[f64; 4]], classes: &[usize]) -> AnnotationSet {
        AnnotationSet {
            video_id: "t".into(),
            frames_total: 1,
            width: 64,
            height: 64,
            tubes: boxes
                .iter()
                .zip(classes)
                .enumerate()
                .map(|(k, (b, &c))| TubeAnnotation {
                    actor_id: k as u64,
                    class_ids: vec![vec![c]],
                    boxes: vec![*b],
                    present: vec![true],
                })
                .collect(),
            labelled_mask: vec![true],
        }
    }

    #[test]
    fn background_only_frame() {
        let gt = one_frame_gt(&[], &[]);
        let mut preds = TubeletSet::zeros(1, 2, 2);
        preds.probs = vec![0.2, 0.1, 0.6, 0.3, 0.4, 0.5];
        let br = total_loss(&preds, &gt, MatchingMode::PerFrame, &cfg()).unwrap();
        let bg = background_target(2);
        let expect = focal_class_loss(&bg, preds.probs(0, 0), &cfg()) + focal_class_loss(&bg, preds.probs(0, 1), &cfg());
        assert_relative_eq!(br.total, expect, epsilon = 1e-14);
        let g = loss_backward(&br, &preds).unwrap();
        assert!(g.boxes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn term_by_term_one_gt_two_queries() {
        let gt = one_frame_gt(&[[0.5, 0.5, 0.3, 0.2]], &[0]);
        let mut preds = TubeletSet::zeros(1, 2, 2);
        preds.set_bbox(0, 0, crate::geometry::BBox::new(0.45, 0.52, 0.25, 0.22));
        preds.set_bbox(0, 1, crate::geometry::BBox::new(0.1, 0.1, 0.1, 0.1));
        preds.probs = vec![0.7, 0.2, 0.1, 0.3, 0.3, 0.6];
        let br = total_loss(&preds, &gt, MatchingMode::PerFrame, &cfg()).unwrap();
        assert_eq!(br.assignment.frames[0].pairs, vec![(0, 0)]);
        let target = crate::geometry::BBox::new(0.5, 0.5, 0.3, 0.2);
        let b = preds.bbox(0, 0);
        let expect = (0.05 + 0.02 + 0.05 + 0.02)
            + (1.0 - giou(&b, &target))
            + focal_class_loss(&[1.0, 0.0, 0.0], &[0.7, 0.2, 0.1], &cfg())
            + focal_class_loss(&[0.0, 0.0, 1.0], &[0.3, 0.3, 0.6], &cfg());
        assert_relative_eq!(br.total, expect, epsilon = 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let gt = one_frame_gt(&[[0.5, 0.5, 0.3, 0.2]], &[1]);
        let mut preds = TubeletSet::zeros(1, 2, 2);
        preds.set_bbox(0, 0, crate::geometry::BBox::new(0.5, 0.5, 0.3, 0.2));
        preds.set_bbox(0, 1, crate::geometry::BBox::new(0.2, 0.2, 0.1, 0.1));
        preds.probs = vec![1e-6, 1.0 - 1e-6, 1e-6, 1e-6, 1e-6, 1.0 - 1e-6];
        let br = total_loss(&preds, &gt, MatchingMode::Tubelet, &cfg()).unwrap();
        assert!(br.total < 1e-3);
        let g = loss_backward(&br, &preds).unwrap();
        assert!(g.probs.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn missing_gt_in_assignment_is_an_error() {
        let gt = one_frame_gt(&[[0.5, 0.5, 0.3, 0.2]], &[1]);
        let preds = TubeletSet::zeros(1, 2, 2);
        let fa = FrameAssignment {
            frame: 0,
            pairs: vec![(3, 0)],
        };
        assert!(frame_loss(&preds, &gt, &fa, &cfg()).is_err());
    }
}
