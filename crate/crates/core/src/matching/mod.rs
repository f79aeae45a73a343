//! Cost construction and optimal assignment of predicted slots to ground truth.

mod hungarian;

pub use hungarian::solve_assignment;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::AnnotationSet;
use crate::error::{Error, Result};
use crate::geometry::{box_l1, giou};
use crate::loss::{class_match_cost, LossConfig};
use crate::model::TubeletSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    #[default]
    PerFrame,
    Tubelet,
}

impl std::str::FromStr for MatchingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_frame" => Ok(Self::PerFrame),
            "tubelet" => Ok(Self::Tubelet),
            _ => Err(Error::Config(format!("unknown matching mode {s:?}"))),
        }
    }
}

/// Costs at one labelled frame: `cost[i][j]` pairs ground-truth instance `i`
/// (actor `actors[i]`) with query slot `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCost {
    pub frame: usize,
    pub actors: Vec<u64>,
    pub cost: Vec<Vec<f64>>,
}

/// Per-labelled-frame cost matrices over a shared set of query slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTensor {
    pub slots: usize,
    pub frames: Vec<FrameCost>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameAssignment {
    pub frame: usize,
    /// `(gt instance index, query slot)` pairs, ordered by gt index.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub mode: MatchingMode,
    pub frames: Vec<FrameAssignment>,
}

impl Assignment {
    pub fn frame(&self, frame: usize) -> Option<&FrameAssignment> {
        self.frames.iter().find(|f| f.frame == frame)
    }
}

impl CostTensor {
    /// Sum of the chosen pair costs, averaged over labelled frames.
    pub fn assignment_cost(&self, assignment: &Assignment) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .frames
            .iter()
            .zip(&assignment.frames)
            .map(|(fc, fa)| fa.pairs.iter().map(|&(i, j)| fc.cost[i][j]).sum::<f64>())
            .sum();
        total / self.frames.len() as f64
    }
}

/// Unweighted `L1 + (1 - GIoU) + class` cost at every labelled frame.
pub fn build_cost(preds: &TubeletSet, gt: &AnnotationSet, cfg: &LossConfig) -> Result<CostTensor> {
    let labelled = gt.labelled_frames();
    if labelled.is_empty() {
        return Err(Error::InvalidInput("no labelled frames".into()));
    }
    if gt.frames_total != preds.frames {
        return Err(Error::Shape(format!(
            "annotation covers {} frames, predictions {}",
            gt.frames_total, preds.frames
        )));
    }
    let mut frames = Vec::with_capacity(labelled.len());
    for t in labelled {
        let instances = gt.instances_at(t);
        if instances.len() > preds.slots {
            return Err(Error::Matching("more ground truths than queries".into()));
        }
        let mut cost = Vec::with_capacity(instances.len());
        for inst in &instances {
            let target = inst.target(preds.classes);
            let row = (0..preds.slots)
                .map(|j| {
                    let b = preds.bbox(t, j);
                    box_l1(&b, &inst.bbox)
                        + (1.0 - giou(&b, &inst.bbox))
                        + class_match_cost(&target, preds.probs(t, j), cfg)
                })
                .collect();
            cost.push(row);
        }
        frames.push(FrameCost {
            frame: t,
            actors: instances.iter().map(|i| i.actor_id).collect(),
            cost,
        });
    }
    Ok(CostTensor {
        slots: preds.slots,
        frames,
    })
}

/// Independent optimal assignment at every labelled frame.
pub fn match_per_frame(costs: &CostTensor) -> Result<Assignment> {
    let frames = costs
        .frames
        .iter()
        .map(|fc| {
            let (map, _) = solve_assignment(&fc.cost)?;
            Ok(FrameAssignment {
                frame: fc.frame,
                pairs: map.into_iter().enumerate().collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Assignment {
        mode: MatchingMode::PerFrame,
        frames,
    })
}

/// One assignment of actors (tubes) to query slots shared by all labelled
/// frames, minimising the mean frame cost.
pub fn match_tubelet(costs: &CostTensor) -> Result<Assignment> {
    let mut actors: Vec<u64> = Vec::new();
    for fc in &costs.frames {
        if fc.actors.len() != fc.cost.len() {
            return Err(Error::Matching("actor ids do not line up with cost rows".into()));
        }
        let unique: BTreeSet<u64> = fc.actors.iter().copied().collect();
        if unique.len() != fc.actors.len() {
            return Err(Error::Matching(format!(
                "inconsistent actor ids at frame {}: duplicate identity",
                fc.frame
            )));
        }
        for &a in &fc.actors {
            if !actors.contains(&a) {
                actors.push(a);
            }
        }
    }
    let norm = 1.0 / costs.frames.len().max(1) as f64;
    let mut tube_cost = vec![vec![0.0; costs.slots]; actors.len()];
    for fc in &costs.frames {
        for (row, actor) in fc.cost.iter().zip(&fc.actors) {
            let k = actors.iter().position(|a| a == actor).expect("collected above");
            for (acc, c) in tube_cost[k].iter_mut().zip(row) {
                *acc += c * norm;
            }
        }
    }
    let (map, _) = solve_assignment(&tube_cost)?;
    let frames = costs
        .frames
        .iter()
        .map(|fc| {
            let pairs = fc
                .actors
                .iter()
                .enumerate()
                .map(|(i, actor)| {
                    let k = actors.iter().position(|a| a == actor).expect("collected above");
                    (i, map[k])
                })
                .collect();
            FrameAssignment {
                frame: fc.frame,
                pairs,
            }
        })
        .collect();
    Ok(Assignment {
        mode: MatchingMode::Tubelet,
        frames,
    })
}

pub fn match_costs(costs: &CostTensor, mode: MatchingMode) -> Result<Assignment> {
    match mode {
        MatchingMode::PerFrame => match_per_frame(costs),
        MatchingMode::Tubelet => match_tubelet(costs),
    }
}
